import json
import math

import numpy as np
import pytest
import torch

from synthcount import train
from synthcount.genclient import OracleBackend, build_count_dataset, build_sorting_dataset, default_schedule
from synthcount.manifest import read_manifest
from synthcount.models import CountingModel, EncoderConfig, checksum
from synthcount.scene_lab import SceneSpec, render_scene
from synthcount.train import (
    EmptyCategory,
    ManifestEmpty,
    NonFiniteLoss,
    TrainConfig,
    compute_prototypes,
    filter_outliers,
    least_squares_mse,
    pretrain_sorting,
    train_count,
    train_density,
)


@pytest.fixture(scope="module")
def sorting(tmp_path_factory):
    out = tmp_path_factory.mktemp("sorting")
    refs = [render_scene(SceneSpec(seed=i, count=10 + 5 * i, background_id=i)) for i in range(3)]
    res = build_sorting_dataset(refs, OracleBackend(), out, n_minus=2, n_plus=2)
    return res.manifest, read_manifest(res.manifest, "sorting")


@pytest.fixture(scope="module")
def count_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("count")
    res = build_count_dataset(default_schedule(12, (2, 10, 30)), 8, OracleBackend(), out)
    return res.manifest, read_manifest(res.manifest, "count")


def test_one_triplet_overfits_to_zero(sorting, tmp_path):
    path, rows = sorting
    model, log = pretrain_sorting(rows[:1], path, TrainConfig(lr_encoder=1e-3, lr_head=1e-2, epochs=300), log_path=tmp_path / "log.jsonl")
    assert model.meta["sort_final_loss"] == 0.0
    recs = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert recs[0]["epoch"] == 0 and set(recs[0]) == {"stage", "epoch", "loss", "metric"}
    assert recs[-1]["loss"] == 0.0


def test_pretrain_reduces_loss_and_is_deterministic(sorting):
    path, rows = sorting
    cfg = TrainConfig(epochs=3, batch_size=4)
    a, _ = pretrain_sorting(rows, path, cfg)
    b, _ = pretrain_sorting(rows, path, cfg)
    assert a.meta["sort_final_loss"] <= a.meta["sort_initial_loss"]
    assert checksum(a.encoder) == checksum(b.encoder)
    assert checksum(a.sort_head) == checksum(b.sort_head)


def test_pretrain_errors(sorting, monkeypatch):
    path, rows = sorting
    with pytest.raises(ManifestEmpty):
        pretrain_sorting([], path)
    monkeypatch.setattr(train, "triplet_sort_loss", lambda *a, **k: (torch.tensor(float("nan"), requires_grad=True),) * 3)
    with pytest.raises(NonFiniteLoss):
        pretrain_sorting(rows, path, TrainConfig(epochs=1))


def test_sort_head_orientation(sorting):
    path, rows = sorting
    model, _ = pretrain_sorting(rows, path, TrainConfig(epochs=2, batch_size=4))
    images, idx, _ = train._triplet_tensors(rows, path, 96)
    yhat = model.predict_rank(images)
    trip = yhat[idx.numpy()]
    assert (trip[:, 2] - trip[:, 0]).mean() >= 0


def test_prototypes_exact():
    f = np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 5.0]])
    table = compute_prototypes(f, [7, 9, 9])
    np.testing.assert_array_equal(table.entries[7][0], f[0])
    np.testing.assert_array_equal(table.entries[9][0], [4.0, 3.5])
    assert table.entries[9][1] == 2
    rng = np.random.default_rng(0)
    f = rng.standard_normal((50, 6))
    cats = rng.integers(0, 4, 50)
    table = compute_prototypes(f, cats)
    for c in range(4):
        brute = sum(f[i] for i in range(50) if cats[i] == c) / sum(cats == c)
        np.testing.assert_allclose(table.entries[c][0], brute, atol=1e-6)
    with pytest.raises(EmptyCategory):
        compute_prototypes(f, cats, only=[11])


def test_filter_basics():
    f = np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1], [0.2, 1.0]])
    rows = [{"path": str(i), "prompt_count": c, "kept": True} for i, c in enumerate([1, 5, 5, 5])]
    table = compute_prototypes(f, [1, 5, 5, 5])
    # a row whose feature equals its own prototype is kept
    own = compute_prototypes(f[:1], [1])
    own.entries[5] = table.entries[5]
    out, report = filter_outliers(rows[:1], f[:1], own)
    assert out[0]["kept"]
    out, report = filter_outliers(rows, f, table)
    assert [r["kept"] for r in out] == [True, True, False, True]
    assert report[5] == {"kept": 2, "dropped": 1}
    single = compute_prototypes(f, [5] * 4)
    rows5 = [dict(r, prompt_count=5) for r in rows]
    assert all(r["kept"] for r in filter_outliers(rows5, f, single)[0])


def test_filter_idempotent_and_zero_exempt():
    rng = np.random.default_rng(3)
    centres = {0: np.array([0, 0, 5.0]), 2: np.array([5.0, 0, 0]), 9: np.array([0, 5.0, 0])}
    cats = [0] * 5 + [2] * 10 + [9] * 10
    f = np.stack([centres[c] + rng.normal(0, 2.0, 3) for c in cats])
    rows = [{"path": str(i), "prompt_count": c, "kept": True} for i, c in enumerate(cats)]
    table = compute_prototypes(f, cats)
    first, _ = filter_outliers(rows, f, table)
    assert all(r["kept"] for r in first[:5])
    kept = [i for i, r in enumerate(first) if r["kept"]]
    again, _ = filter_outliers([first[i] for i in kept], f[kept], table)
    assert all(r["kept"] for r in again)


def test_count_probe_freezes_encoder(count_data):
    path, rows = count_data
    model = CountingModel.create(seed=0)
    _, feats = train.features_for(model, path, rows)
    before = checksum(model.encoder)
    train_count(rows, model, features=feats)
    assert checksum(model.encoder) == before


def test_count_probe_matches_least_squares():
    rng = np.random.default_rng(0)
    feats = rng.gamma(2.0, 1.0, (400, 16))
    target = np.clip(np.rint(feats @ rng.uniform(0, 10, 16) + rng.normal(0, 5, 400)), 0, None)
    rows = [{"path": str(i), "prompt_count": int(t)} for i, t in enumerate(target)]
    model = CountingModel.create(EncoderConfig(feature_dim=16))
    train_count(rows, model, features=feats)
    assert train.count_mse(model, feats, target) <= 1.05 * least_squares_mse(feats, target)


def test_count_finetune_mode_updates_encoder(count_data):
    path, rows = count_data
    model = CountingModel.create(seed=0)
    images, feats = train.features_for(model, path, rows)
    before = checksum(model.encoder)
    train_count(rows, model, TrainConfig(epochs=1), features=feats, images=images, mode="finetune")
    assert checksum(model.encoder) != before
    assert model.meta["count_mode"] == "finetune"


def test_count_skips_dropped_rows(count_data):
    path, rows = count_data
    model = CountingModel.create(seed=0)
    _, feats = train.features_for(model, path, rows)
    with pytest.raises(ManifestEmpty):
        train_count([dict(r, kept=False) for r in rows], model, features=feats)


def test_density_shuffled_labels_and_uniform_loss():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((300, 16))
    labels = rng.permutation(np.repeat([0, 1, 2], 100))
    rows = [{"path": str(i), "density_label": int(l)} for i, l in enumerate(labels)]
    model = CountingModel.create(EncoderConfig(feature_dim=16))
    train_density(rows, model, feats, TrainConfig(lr_head=1e-2, epochs=5, batch_size=64))
    held = rng.standard_normal((3000, 16))
    held_labels = rng.integers(0, 3, 3000)
    with torch.no_grad():
        acc = float((model.density_head(torch.as_tensor(held, dtype=torch.float32)).argmax(-1).numpy() == held_labels).mean())
    assert abs(acc - 1 / 3) <= 0.1
    uniform = torch.nn.functional.cross_entropy(torch.zeros(4, 3), torch.tensor([0, 1, 2, 1]))
    assert float(uniform) == pytest.approx(math.log(3))
    with pytest.raises(ManifestEmpty):
        train_density([], model, feats[:0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_head=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_bb=0)
    assert TrainConfig().lambda_weight == 5.0
