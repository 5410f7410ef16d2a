import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from synthcount.dcgp import (
    RECOUNT,
    STRATEGIES,
    USE_MAP,
    BadM,
    cell_weights,
    count_map,
    fixed_partition_count,
    gated_partition_count,
    infer_count,
    overlay,
    partition_plan,
    region_mass,
    tile_boxes,
)
from synthcount.models import DENSE, SPARSE, CountingModel, resize_image
from synthcount.scene_lab import SceneSpec, render_scene


def make_model(verdict=None, seed=0):
    """Random encoder with a non-trivial count head; density forced to ``verdict``."""
    model = CountingModel.create(seed=seed)
    with torch.no_grad():
        model.count_head.weight.normal_(0, 50.0)
        model.count_head.bias.fill_(3.0)
        if verdict is not None:
            model.density_head.weight.zero_()
            model.density_head.bias.zero_()
            model.density_head.bias[verdict] = 10.0
    return model


@pytest.fixture(scope="module")
def image():
    return render_scene(SceneSpec(seed=2, count=120, canvas=(192, 192), object_size=5)).image


@settings(max_examples=80, deadline=None)
@given(st.integers(8, 200), st.integers(8, 200), st.integers(1, 6))
def test_tiles_cover_every_pixel_once(h, w, M):
    cover = np.zeros((h, w), int)
    boxes = tile_boxes(h, w, M)
    assert len(boxes) == M * M
    for y0, y1, x0, x1 in boxes:
        assert y1 > y0 and x1 > x0
        cover[y0:y1, x0:x1] += 1
    assert (cover == 1).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(12, 120), st.integers(12, 120), st.integers(1, 5), st.integers(2, 15))
def test_cell_weights_partition_unity(h, w, M, g):
    wts = cell_weights(tile_boxes(h, w, M), (h, w), (g, g))
    np.testing.assert_allclose(wts.sum(axis=0), 1.0, atol=1e-12)


def test_bad_m():
    for bad in (0, -1, 1.5, "3"):
        with pytest.raises(BadM):
            tile_boxes(12, 12, bad)
        with pytest.raises(BadM):
            infer_count(np.zeros((96, 96, 3), np.uint8), make_model(), bad)


def test_count_map_sums_to_whole_image_prediction(image):
    model = make_model()
    small = resize_image(image, 96)
    cmap = count_map(small, model)
    assert cmap.values.shape == (12, 12)
    assert cmap.total == pytest.approx(float(model.predict_count(small)[0]), abs=1e-4)
    assert cmap.bias == pytest.approx(3.0)


def test_plan_single_dense_block():
    dmap = np.full((12, 12), SPARSE)
    dmap[4:8, 8:12] = DENSE
    plan = partition_plan(dmap, 3)
    assert plan.n_recount == 1
    assert plan.modes[1, 2] == RECOUNT
    assert plan.dense_fraction[1, 2] == pytest.approx(1.0)


def test_plan_threshold_is_strict():
    dmap = np.full((12, 12), SPARSE)
    dmap[0:2, 0:4] = DENSE  # exactly half of cell (0, 0)
    plan = partition_plan(dmap, 3)
    assert plan.dense_fraction[0, 0] == pytest.approx(0.5)
    assert plan.modes[0, 0] == USE_MAP
    dmap[2, 0] = DENSE
    assert partition_plan(dmap, 3).modes[0, 0] == RECOUNT


def test_plan_on_pixel_grid_matches_area():
    dmap = np.zeros((12, 12), int)
    dmap[:, :6] = DENSE
    plan = partition_plan(dmap, 2, image_shape=(200, 300))
    np.testing.assert_allclose(plan.dense_fraction, [[1, 0], [1, 0]])


@pytest.mark.parametrize("verdict", [SPARSE, DENSE])
def test_audit_trail_closes(image, verdict):
    res = infer_count(image, make_model(verdict), M=3)
    assert len(res.cells) == 9
    assert sum(c.contribution for c in res.cells) == pytest.approx(res.final_count, abs=1e-6)
    d = res.to_dict()
    assert set(d) == {"final_count", "M", "strategy", "cells", "flags"}
    for c in d["cells"]:
        assert (c["mode"] == RECOUNT) == (c["source_res"] is not None)


def test_no_dense_cells_gives_whole_image_count(image):
    model = make_model(SPARSE)
    res = infer_count(image, model, M=3)
    assert res.plan.n_recount == 0
    whole = float(model.predict_count(resize_image(image, 96))[0])
    assert res.final_count == pytest.approx(whole, abs=1e-4)


def test_all_dense_equals_fixed_partition(image):
    model = make_model(DENSE)
    res = infer_count(image, model, M=3)
    fixed = fixed_partition_count(image, model, 3)
    assert res.plan.n_recount == 9
    patches = [image[y0:y1, x0:x1] for y0, y1, x0, x1 in tile_boxes(192, 192, 3)]
    brute = float(model.predict_count(patches).sum())
    assert res.final_count == pytest.approx(fixed.final_count, abs=1e-6)
    assert res.final_count == pytest.approx(brute, abs=1e-3)
    assert {tuple(c.source_res) for c in res.cells} == {(64, 64)}


def test_m1_equals_whole_image(image):
    model = make_model(DENSE)
    whole = float(model.predict_count(resize_image(image, 96))[0])
    assert infer_count(image, model, M=1).final_count == pytest.approx(whole, abs=1e-4)
    assert fixed_partition_count(image, model, 1).final_count == pytest.approx(whole, abs=1e-4)


def test_constant_image_fixed_partition_is_additive():
    model = make_model()
    img = np.full((192, 192, 3), 90, np.uint8)
    one = float(model.predict_count(img[:96, :96])[0])
    assert fixed_partition_count(img, model, 2).final_count == pytest.approx(4 * one, abs=1e-3)


@pytest.mark.parametrize("verdict,M_used", [(DENSE, 3), (SPARSE, 1)])
def test_gated_follows_whole_image_verdict(image, verdict, M_used):
    model = make_model(verdict)
    res = gated_partition_count(image, model, 3)
    assert res.flags["whole_image_density"] == verdict
    assert len(res.cells) == M_used ** 2
    assert res.final_count == pytest.approx(fixed_partition_count(image, model, M_used).final_count, abs=1e-9)


def test_hires_flags_and_fallback(image):
    model = make_model(DENSE)
    hi = infer_count(image, model, 3)
    assert hi.flags == {"hires_available": True, "hires_used": True}
    lo = infer_count(image, model, 3, use_hires=False)
    assert not lo.flags["hires_used"] and "fallback" in lo.flags
    small = infer_count(resize_image(image, 96), model, 3)
    assert not small.flags["hires_available"] and "fallback" in small.flags
    assert lo.final_count == pytest.approx(small.final_count, abs=1e-3)
    assert hi.final_count != pytest.approx(lo.final_count, abs=1e-6)


def test_strategy_table(image):
    model = make_model(DENSE)
    for name, fn in STRATEGIES.items():
        res = fn(image, model, 2)
        assert res.strategy == name and np.isfinite(res.final_count)


def test_overlay_shape(image):
    model = make_model()
    out = overlay(image, count_map(resize_image(image, 96), model))
    assert out.shape == image.shape and out.dtype == np.uint8


def test_region_mass_tiles_to_total(image):
    cmap = count_map(resize_image(image, 96), make_model())
    for M in (1, 2, 3):
        assert region_mass(cmap, tile_boxes(192, 192, M), (192, 192)).sum() == pytest.approx(cmap.total, abs=1e-6)
    left = region_mass(cmap, [(0, 192, 0, 96)], (192, 192))[0]
    assert left == pytest.approx(cmap.values[:, :6].sum() + cmap.bias / 2)
