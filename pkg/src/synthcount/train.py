"""Training stages: sorting pre-training, filtered count probe, density head.

Stages 2 and 3 leave the encoder untouched unless an ablation mode asks
for full fine-tuning.  Linear heads are fitted on standardised features
and targets, then folded back into a plain affine map on raw features.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr
from torch import nn

from .manifest import load_image, resolve
from .models import CountingModel, EncoderConfig, checksum, pool, resize_image, to_tensor
from .ranking import DEFAULT_LAMBDA_BB, DEFAULT_LAMBDA_WEIGHT, triplet_sort_loss

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


class ManifestEmpty(TrainError):
    pass


class NonFiniteLoss(TrainError):
    pass


class EmptyCategory(TrainError):
    pass


@dataclass
class TrainConfig:
    lr_head: float = 1e-3
    lr_encoder: float = 1e-4
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    lambda_weight: float = DEFAULT_LAMBDA_WEIGHT
    lambda_bb: float = DEFAULT_LAMBDA_BB
    freeze_encoder: bool = True

    def __post_init__(self):
        for name in ("lr_head", "lr_encoder", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lambda_weight < 0 or self.lambda_bb <= 0:
            raise ValueError("epochs and lambda_weight must be >= 0, lambda_bb > 0")


class TrainLog:
    """Collects ``{stage, epoch, loss, metric}`` records, optionally to a file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, stage: str, epoch: int, loss: float, metric: float | None = None) -> None:
        rec = {"stage": stage, "epoch": epoch, "loss": loss, "metric": metric}
        self.records.append(rec)
        log.info("%s epoch %d loss %.5g metric %s", stage, epoch, loss, metric)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


def load_images(manifest_path: str | Path, rels: Sequence[str], size: int | None = None) -> np.ndarray:
    """Stack of uint8 images (N, H, W, 3), optionally resized."""
    out = []
    for rel in rels:
        im = load_image(resolve(manifest_path, rel))
        out.append(resize_image(im, size) if size else im)
    return np.stack(out)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"{stage}: loss became {loss.item()} at epoch {epoch}, step {step}")


def _normalization_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    x = images.reshape(-1, 3).astype(np.float64) / 255.0
    return x.mean(0).tolist(), x.std(0).tolist()


# -- stage 1 -----------------------------------------------------------------


def _triplet_tensors(rows: Sequence[dict], manifest_path, size: int):
    paths = sorted({p for r in rows for p in r["paths"]})
    index = {p: i for i, p in enumerate(paths)}
    images = load_images(manifest_path, paths, size)
    idx = torch.tensor([[index[p] for p in r["paths"]] for r in rows])
    ranks = torch.tensor([r["ranks"] for r in rows], dtype=torch.float32)
    return images, idx, ranks


def _sorting_forward(model: CountingModel, x: torch.Tensor, idx: torch.Tensor):
    # encode each distinct image of the batch once
    uniq, inverse = torch.unique(idx, return_inverse=True)
    z = pool(model.encoder(x[uniq]))
    zt = z[inverse]  # (B, 3, d)
    yhat = model.sort_head(zt).squeeze(-1)
    return yhat, zt


@torch.no_grad()
def sorting_loss_on(model: CountingModel, x, idx, ranks, cfg: TrainConfig) -> tuple[float, float]:
    """Mean sorting loss and fraction of zero-loss triplets over a dataset."""
    model.eval()
    losses = []
    for i in range(0, len(idx), 128):
        yhat, z = _sorting_forward(model, x, idx[i : i + 128])
        for j in range(len(yhat)):
            total, _, _ = triplet_sort_loss(yhat[j : j + 1], z[j : j + 1], ranks[i + j : i + j + 1], cfg.lambda_weight, cfg.lambda_bb)
            losses.append(float(total))
    losses = np.asarray(losses)
    return float(losses.mean()), float((losses == 0).mean())


def pretrain_sorting(
    rows: Sequence[dict],
    manifest_path: str | Path,
    cfg: TrainConfig = TrainConfig(),
    enc_cfg: Optional[EncoderConfig] = None,
    model: Optional[CountingModel] = None,
    log_path: str | Path | None = None,
) -> tuple[CountingModel, TrainLog]:
    """Train encoder and sort head on ranked triplets with the sorting loss.

    Training stops early once every training triplet has zero loss.  The
    loss only sees pairwise distances, so it cannot tell "more" from
    "fewer"; afterwards the sort head is negated if needed so that larger
    outputs mean more objects on the training triplets.
    """
    rows = list(rows)
    if not rows:
        raise ManifestEmpty("sorting manifest has no rows")
    model = model or CountingModel.create(enc_cfg, seed=cfg.seed)
    images, idx, ranks = _triplet_tensors(rows, manifest_path, model.cfg.input_size)
    model.encoder.set_normalization(*_normalization_stats(images))
    x = to_tensor(images)
    train_log = TrainLog(log_path)

    initial, _ = sorting_loss_on(model, x, idx, ranks, cfg)
    train_log("sort", 0, initial, None)
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(
        [
            {"params": model.encoder.parameters(), "lr": cfg.lr_encoder},
            {"params": model.sort_head.parameters(), "lr": cfg.lr_head},
        ]
    )
    final = initial
    for epoch in range(1, cfg.epochs + 1):
        if final == 0.0:
            break
        model.encoder.train()
        model.sort_head.train()
        perm = torch.randperm(len(idx), generator=gen)
        for step, start in enumerate(range(0, len(perm), cfg.batch_size)):
            b = perm[start : start + cfg.batch_size]
            yhat, z = _sorting_forward(model, x, idx[b])
            loss, _, _ = triplet_sort_loss(yhat, z, ranks[b], cfg.lambda_weight, cfg.lambda_bb)
            _check_finite(loss, "sort", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
        final, solved = sorting_loss_on(model, x, idx, ranks, cfg)
        train_log("sort", epoch, final, solved)

    flipped = orient_sort_head(model, x, idx)
    model.meta.update(
        {
            "sort_initial_loss": initial,
            "sort_final_loss": final,
            "sort_head_flipped": flipped,
            "train_config": asdict(cfg),
        }
    )
    return model.eval(), train_log


@torch.no_grad()
def orient_sort_head(model: CountingModel, x: torch.Tensor, idx: torch.Tensor) -> bool:
    yhat, _ = _sorting_forward(model.eval(), x, idx)
    if float((yhat[:, 2] - yhat[:, 0]).mean()) < 0:
        model.sort_head.weight.neg_()
        model.sort_head.bias.neg_()
        return True
    return False


# -- stage 2 -----------------------------------------------------------------


@dataclass
class PrototypeTable:
    """Per-category mean feature vectors and their sample counts."""

    entries: dict[int, tuple[np.ndarray, int]] = field(default_factory=dict)

    @property
    def categories(self) -> list[int]:
        return sorted(self.entries)

    def matrix(self) -> tuple[list[int], np.ndarray]:
        cats = self.categories
        return cats, np.stack([self.entries[c][0] for c in cats])


def compute_prototypes(features: np.ndarray, categories: Sequence[int], only: Iterable[int] | None = None) -> PrototypeTable:
    """Exact per-category means of ``features`` (rows aligned with ``categories``)."""
    features = np.asarray(features, dtype=np.float64)
    categories = np.asarray(categories)
    wanted = sorted(set(categories.tolist())) if only is None else sorted(only)
    table = PrototypeTable()
    for c in wanted:
        members = features[categories == c]
        if len(members) == 0:
            raise EmptyCategory(f"category {c} has no samples")
        table.entries[int(c)] = (members.mean(axis=0), len(members))
    return table


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return an @ bn.T


def filter_outliers(
    rows: Sequence[dict],
    features: np.ndarray,
    table: PrototypeTable,
    exempt: Iterable[int] = (0,),
) -> tuple[list[dict], dict]:
    """Mark rows whose feature is closer (cosine) to another category's prototype.

    Returns copies of ``rows`` with ``kept`` set, and a report of kept and
    dropped counts per category.  Rows in ``exempt`` categories are kept.
    """
    exempt = set(exempt)
    cats, protos = table.matrix()
    col = {c: i for i, c in enumerate(cats)}
    sims = _cosine(np.asarray(features, dtype=np.float64), protos)
    out, report = [], {}
    for row, s in zip(rows, sims):
        c = int(row["prompt_count"])
        if c in exempt:
            keep = True
        else:
            if c not in col:
                raise EmptyCategory(f"no prototype for category {c}")
            keep = bool(s[col[c]] >= s.max())
        out.append(dict(row, kept=keep))
        r = report.setdefault(c, {"kept": 0, "dropped": 0})
        r["kept" if keep else "dropped"] += 1
    return out, report


@dataclass
class _Standardizer:
    mu: torch.Tensor
    sigma: torch.Tensor

    @classmethod
    def fit(cls, z: torch.Tensor) -> "_Standardizer":
        sigma = z.std(0)
        return cls(z.mean(0), sigma.clamp_min(1e-4 + 1e-2 * float(sigma.mean())))

    def __call__(self, z):
        return (z - self.mu) / self.sigma


def _fold(head: nn.Linear, std: _Standardizer, scale: float = 1.0, shift: float = 0.0) -> nn.Linear:
    """Affine head on raw features equivalent to ``scale * head(std(z)) + shift``."""
    w = head.weight.detach() / std.sigma
    b = head.bias.detach() - (w * std.mu).sum(-1)
    out = nn.Linear(w.shape[1], w.shape[0])
    with torch.no_grad():
        out.weight.copy_(scale * w)
        out.bias.copy_(scale * b + shift)
    return out


def _fit_linear(
    z: torch.Tensor,
    target: torch.Tensor,
    n_out: int,
    loss_fn,
    cfg: TrainConfig,
    stage: str,
    train_log: TrainLog,
    metric_fn=None,
) -> tuple[nn.Linear, _Standardizer]:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    std = _Standardizer.fit(z)
    zs = std(z)
    head = nn.Linear(z.shape[1], n_out)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr_head)
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(len(zs), generator=gen)
        for step, start in enumerate(range(0, len(perm), cfg.batch_size)):
            b = perm[start : start + cfg.batch_size]
            loss = loss_fn(head(zs[b]), target[b])
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if epoch == cfg.epochs or epoch % max(1, cfg.epochs // 10) == 0:
            with torch.no_grad():
                out = head(zs)
                full = float(loss_fn(out, target))
                train_log(stage, epoch, full, metric_fn(out, target) if metric_fn else None)
    return head, std


def _count_targets(rows: Sequence[dict]) -> torch.Tensor:
    return torch.tensor([float(r["prompt_count"]) for r in rows], dtype=torch.float32)


def train_count(
    rows: Sequence[dict],
    model: CountingModel,
    cfg: TrainConfig = TrainConfig(lr_head=1e-2, epochs=200, batch_size=64),
    features: Optional[np.ndarray] = None,
    images: Optional[np.ndarray] = None,
    mode: Optional[str] = None,
    log_path: str | Path | None = None,
) -> nn.Linear:
    """Fit the count head with mean squared error on rows marked ``kept``.

    ``mode='probe'`` trains only the head on frozen pooled ``features``;
    ``'finetune'`` also updates the encoder from ``images``; ``'scratch'``
    re-initialises the encoder first.  By default the mode follows
    ``cfg.freeze_encoder``.  The fitted head is installed on ``model`` and
    returned.
    """
    if mode is None:
        mode = "probe" if cfg.freeze_encoder else "finetune"
    if mode not in ("probe", "finetune", "scratch"):
        raise ValueError(f"unknown mode {mode!r}")
    keep = np.array([r.get("kept", True) for r in rows], dtype=bool)
    rows = [r for r, k in zip(rows, keep) if k]
    if not rows:
        raise ManifestEmpty("no kept rows to train the count head on")
    target = _count_targets(rows)
    train_log = TrainLog(log_path)
    if mode == "probe":
        if features is None:
            raise ValueError("probe mode needs precomputed features")
        z = torch.as_tensor(np.asarray(features)[keep], dtype=torch.float32)
        before = checksum(model.encoder)
        scale, shift = float(target.std().clamp_min(1.0)), float(target.mean())
        head, std = _fit_linear(
            z,
            (target - shift) / scale,
            1,
            lambda out, t: F.mse_loss(out.squeeze(-1), t),
            cfg,
            "count",
            train_log,
        )
        model.count_head = _fold(head, std, scale, shift)
        if checksum(model.encoder) != before:
            raise TrainError("encoder changed during a frozen-encoder stage")
    else:
        if images is None:
            raise ValueError(f"{mode} mode needs images")
        model.count_head = _finetune_count(np.asarray(images)[keep], target, model, cfg, mode, train_log)
    model.meta["count_mode"] = mode
    return model.count_head.eval()


def _finetune_count(images: np.ndarray, target: torch.Tensor, model: CountingModel, cfg: TrainConfig, mode: str, train_log: TrainLog) -> nn.Linear:
    torch.manual_seed(cfg.seed)
    if mode == "scratch":
        fresh = CountingModel.create(model.cfg, seed=cfg.seed)
        fresh.encoder.set_normalization(model.encoder.pixel_mean.tolist(), model.encoder.pixel_std.tolist())
        model.encoder = fresh.encoder
    x = to_tensor(images, model.cfg.input_size)
    with torch.no_grad():
        model.encoder.eval()
        z0 = torch.cat([pool(model.encoder(x[i : i + 128])) for i in range(0, len(x), 128)])
    std = _Standardizer.fit(z0)
    scale, shift = float(target.std().clamp_min(1.0)), float(target.mean())
    t = (target - shift) / scale
    head = nn.Linear(z0.shape[1], 1)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    opt = torch.optim.Adam(
        [
            {"params": model.encoder.parameters(), "lr": cfg.lr_encoder},
            {"params": head.parameters(), "lr": cfg.lr_head},
        ]
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        model.encoder.train()
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for step, start in enumerate(range(0, len(perm), cfg.batch_size)):
            b = perm[start : start + cfg.batch_size]
            out = head(std(pool(model.encoder(x[b])))).squeeze(-1)
            loss = F.mse_loss(out, t[b])
            _check_finite(loss, "count", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(b)
        train_log("count", epoch, total / len(x) * scale**2, None)
    model.encoder.eval()
    return _fold(head, std, scale, shift)


def train_density(
    rows: Sequence[dict],
    model: CountingModel,
    features: np.ndarray,
    cfg: TrainConfig = TrainConfig(lr_head=1e-2, epochs=15, batch_size=256),
    log_path: str | Path | None = None,
) -> nn.Linear:
    """Fit the 3-class density head with cross-entropy on frozen features.

    ``features`` is either pooled, shape (N, C), or spatial maps (N, C, H, W).
    Maps are trained cell by cell, each cell seen through
    ``model.density_cells`` and carrying its image's label, which matches how
    the head is applied to build density maps.
    """
    if not len(rows):
        raise ManifestEmpty("density manifest has no rows")
    labels = torch.tensor([int(r["density_label"]) for r in rows])
    z = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    if z.ndim == 4:
        cells = model.density_cells(z)
        n, c, h, w = cells.shape
        z = cells.permute(0, 2, 3, 1).reshape(n * h * w, c)
        labels = labels.repeat_interleave(h * w)
    before = checksum(model.encoder)
    head, std = _fit_linear(
        z,
        labels,
        3,
        F.cross_entropy,
        cfg,
        "density",
        TrainLog(log_path),
        metric_fn=lambda out, t: float((out.argmax(-1) == t).float().mean()),
    )
    model.density_head = _fold(head, std)
    if checksum(model.encoder) != before:
        raise TrainError("encoder changed during a frozen-encoder stage")
    return model.density_head.eval()


def features_for(model: CountingModel, manifest_path: str | Path, rows: Sequence[dict], key: str = "path") -> tuple[np.ndarray, np.ndarray]:
    """Load row images and return ``(images, pooled features)`` as arrays."""
    images = load_images(manifest_path, [r[key] for r in rows], model.cfg.input_size)
    return images, model.pooled(images).double().numpy()


def feature_maps_for(model: CountingModel, manifest_path: str | Path, rows: Sequence[dict], key: str = "path") -> tuple[np.ndarray, np.ndarray]:
    """Load row images and return ``(images, feature maps (N, C, H, W))``."""
    images = load_images(manifest_path, [r[key] for r in rows], model.cfg.input_size)
    return images, model.encode(images).numpy()


def least_squares_mse(features: np.ndarray, target: np.ndarray) -> float:
    """Training MSE of the closed-form affine least-squares fit."""
    a = np.hstack([np.asarray(features, dtype=np.float64), np.ones((len(features), 1))])
    coef, *_ = np.linalg.lstsq(a, np.asarray(target, dtype=np.float64), rcond=None)
    return float(np.mean((a @ coef - target) ** 2))


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    return float(spearmanr(a, b).statistic)


def mean_predictor_mae(train_target: Sequence[float], test_target: Sequence[float]) -> float:
    return float(np.mean(np.abs(np.asarray(test_target, float) - np.mean(train_target))))


def count_mse(model: CountingModel, features: np.ndarray, target: Sequence[float]) -> float:
    with torch.no_grad():
        pred = model.count_head(torch.as_tensor(features, dtype=torch.float32)).squeeze(-1).double().numpy()
    return float(np.mean((pred - np.asarray(target, float)) ** 2))

