"""Density classifier guided partitioning (DCGP) inference.

The image is encoded once at inference resolution to obtain a per-cell
count map and density map.  An M x M grid is laid over the image; grid
cells that are mostly dense are re-counted from the corresponding patch
of the native-resolution image, the rest take their share of the count
map.  Fixed and whole-image-gated partitioning are provided as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .models import DENSE, BadShape, CountingModel, pool, resize_image

USE_MAP = "use_map"
RECOUNT = "recount"


class BadM(ValueError):
    pass


@dataclass
class CountMap:
    """Per-cell counts; ``values.sum() + bias`` is the whole-image count."""

    values: np.ndarray
    bias: float

    @property
    def total(self) -> float:
        return float(self.values.sum() + self.bias)


@dataclass
class PartitionPlan:
    M: int
    modes: np.ndarray  # (M, M) of USE_MAP / RECOUNT
    boxes: list[tuple[int, int, int, int]]  # (y0, y1, x0, x1), row-major
    image_shape: tuple[int, int]
    dense_fraction: np.ndarray

    @property
    def n_recount(self) -> int:
        return int((self.modes == RECOUNT).sum())


@dataclass
class CellReport:
    idx: tuple[int, int]
    mode: str
    contribution: float
    source_res: Optional[tuple[int, int]]

    def to_dict(self) -> dict:
        return {
            "idx": list(self.idx),
            "mode": self.mode,
            "contribution": self.contribution,
            "source_res": list(self.source_res) if self.source_res else None,
        }


@dataclass
class InferenceResult:
    final_count: float
    M: int
    strategy: str
    cells: list[CellReport]
    count_map: Optional[CountMap] = None
    density_map: Optional[np.ndarray] = None
    plan: Optional[PartitionPlan] = None
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "final_count": self.final_count,
            "M": self.M,
            "strategy": self.strategy,
            "cells": [c.to_dict() for c in self.cells],
            "flags": self.flags,
        }


def _check_m(M: int) -> None:
    if not isinstance(M, (int, np.integer)) or M < 1:
        raise BadM(f"partition rate M must be a positive integer, got {M!r}")


def tile_boxes(height: int, width: int, M: int) -> list[tuple[int, int, int, int]]:
    """Row-major M x M boxes that tile the pixel grid exactly."""
    _check_m(M)
    if height < M or width < M:
        raise BadShape(f"cannot split a {height}x{width} image into {M}x{M} patches")
    ys = np.rint(np.linspace(0, height, M + 1)).astype(int)
    xs = np.rint(np.linspace(0, width, M + 1)).astype(int)
    return [(int(ys[i]), int(ys[i + 1]), int(xs[j]), int(xs[j + 1])) for i in range(M) for j in range(M)]


def _interval_overlap(lo: np.ndarray, hi: np.ndarray, a: float, b: float) -> np.ndarray:
    return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)


def cell_weights(boxes, image_shape: tuple[int, int], grid: tuple[int, int]) -> np.ndarray:
    """Fraction of each feature cell's area inside each box, shape (n_boxes, H, W).

    Boxes are in pixel coordinates of an image of ``image_shape``; the
    feature grid covers the same extent.  Weights sum to 1 over boxes.
    """
    h_img, w_img = image_shape
    gh, gw = grid
    edges_y = np.arange(gh + 1) / gh
    edges_x = np.arange(gw + 1) / gw
    out = np.empty((len(boxes), gh, gw))
    for k, (y0, y1, x0, x1) in enumerate(boxes):
        oy = _interval_overlap(edges_y[:-1], edges_y[1:], y0 / h_img, y1 / h_img) * gh
        ox = _interval_overlap(edges_x[:-1], edges_x[1:], x0 / w_img, x1 / w_img) * gw
        out[k] = oy[:, None] * ox[None, :]
    return out


def _encode(image: np.ndarray, model: CountingModel) -> torch.Tensor:
    return model.encode(image)[0]


def count_map(image: np.ndarray, model: CountingModel, z: Optional[torch.Tensor] = None) -> CountMap:
    """Per-cell counts ``w . z_ij / (H W)`` with the head bias kept separate."""
    if z is None:
        z = _encode(image, model)
    c, h, w = z.shape
    weight = model.count_head.weight.detach().double()[0]
    values = torch.einsum("c,chw->hw", weight, z.double()) / (h * w)
    return CountMap(values.numpy(), float(model.count_head.bias.detach().double()[0]))


def region_mass(cmap: CountMap, boxes, image_shape: tuple[int, int]) -> np.ndarray:
    """Count-map mass inside each pixel box, with the bias shared out by box area.

    For boxes that tile the image the masses sum to ``cmap.total``.
    """
    weights = cell_weights(boxes, image_shape, cmap.values.shape)
    area = np.array([(y1 - y0) * (x1 - x0) for y0, y1, x0, x1 in boxes], float)
    return (weights * cmap.values).sum(axis=(1, 2)) + cmap.bias * area / (image_shape[0] * image_shape[1])


@torch.no_grad()
def density_map(image: np.ndarray, model: CountingModel, z: Optional[torch.Tensor] = None) -> np.ndarray:
    """Arg-max density class of every feature cell, classified with its neighbourhood."""
    if z is None:
        z = _encode(image, model)
    logits = model.density_head(model.density_cells(z).permute(1, 2, 0))
    return logits.argmax(-1).numpy()


def partition_plan(dmap: np.ndarray, M: int, tau: float = 0.5, image_shape: Optional[tuple[int, int]] = None) -> PartitionPlan:
    """Mark grid cells whose area-weighted dense fraction exceeds ``tau``.

    ``image_shape`` gives the pixel grid the boxes refer to; by default the
    density map's own grid.
    """
    _check_m(M)
    dmap = np.asarray(dmap)
    image_shape = tuple(image_shape or dmap.shape)
    boxes = tile_boxes(*image_shape, M)
    weights = cell_weights(boxes, image_shape, dmap.shape)
    dense = (dmap == DENSE).astype(float)
    frac = (weights * dense).sum(axis=(1, 2)) / weights.sum(axis=(1, 2))
    # tolerance keeps exact half-dense cells on the map side despite rounding
    modes = np.where(frac > tau + 1e-9, RECOUNT, USE_MAP).reshape(M, M)
    return PartitionPlan(M, modes, boxes, image_shape, frac.reshape(M, M))


def _patches(image: np.ndarray, boxes, size: int) -> list[np.ndarray]:
    return [resize_image(np.ascontiguousarray(image[y0:y1, x0:x1]), size) for y0, y1, x0, x1 in boxes]


@torch.no_grad()
def _recount(patches: list[np.ndarray], model: CountingModel) -> np.ndarray:
    if not patches:
        return np.zeros(0)
    return model.count_head(pool(model.encode(patches))).squeeze(-1).double().numpy()


def _views(image: np.ndarray, model: CountingModel, use_hires: bool):
    """Inference-resolution image and the source image patches are cut from."""
    size = model.cfg.input_size
    small = resize_image(image, size)
    hires_available = image.shape[0] > size or image.shape[1] > size
    source = image if (use_hires and hires_available) else small
    flags = {"hires_available": bool(hires_available), "hires_used": bool(use_hires and hires_available)}
    if not flags["hires_used"]:
        flags["fallback"] = "patches cropped from the inference-resolution image"
    return small, source, flags


def infer_count(
    image: np.ndarray,
    model: CountingModel,
    M: int = 3,
    tau: float = 0.5,
    use_hires: bool = True,
) -> InferenceResult:
    """DCGP count for one image given at native resolution."""
    _check_m(M)
    small, source, flags = _views(image, model, use_hires)
    z = _encode(small, model)
    cmap = count_map(small, model, z)
    dmap = density_map(small, model, z)
    plan = partition_plan(dmap, M, tau, source.shape[:2])
    mass = region_mass(cmap, plan.boxes, plan.image_shape)

    modes = plan.modes.ravel()
    recount_ids = [k for k, m in enumerate(modes) if m == RECOUNT]
    recounts = _recount(_patches(source, [plan.boxes[k] for k in recount_ids], model.cfg.input_size), model)
    recount_of = dict(zip(recount_ids, recounts))

    cells = []
    for k, box in enumerate(plan.boxes):
        idx = (k // M, k % M)
        if modes[k] == RECOUNT:
            y0, y1, x0, x1 = box
            cells.append(CellReport(idx, RECOUNT, float(recount_of[k]), (y1 - y0, x1 - x0)))
        else:
            cells.append(CellReport(idx, USE_MAP, float(mass[k]), None))
    final = float(sum(c.contribution for c in cells))
    return InferenceResult(final, M, "dcgp", cells, cmap, dmap, plan, flags)


def fixed_partition_count(image: np.ndarray, model: CountingModel, M: int, use_hires: bool = True) -> InferenceResult:
    """Always re-count all M x M patches and sum them."""
    _check_m(M)
    small, source, flags = _views(image, model, use_hires)
    if M == 1:
        source = small
    boxes = tile_boxes(*source.shape[:2], M)
    preds = _recount(_patches(source, boxes, model.cfg.input_size), model)
    cells = [
        CellReport((k // M, k % M), RECOUNT, float(p), (b[1] - b[0], b[3] - b[2]))
        for k, (b, p) in enumerate(zip(boxes, preds))
    ]
    return InferenceResult(float(preds.sum()), M, "fixed", cells, flags=flags)


@torch.no_grad()
def gated_partition_count(image: np.ndarray, model: CountingModel, M: int, use_hires: bool = True) -> InferenceResult:
    """M x M partitioning if the whole image is classified dense, else 1 x 1."""
    _check_m(M)
    small = resize_image(image, model.cfg.input_size)
    verdict = int(model.density_head(pool(_encode(small, model))).argmax())
    res = fixed_partition_count(image, model, M if verdict == DENSE else 1, use_hires)
    res.strategy = "gated"
    res.flags["whole_image_density"] = verdict
    return res


STRATEGIES = {
    "dcgp": lambda image, model, M, use_hires=True, tau=0.5: infer_count(image, model, M, tau, use_hires),
    "fixed": lambda image, model, M, use_hires=True, tau=0.5: fixed_partition_count(image, model, M, use_hires),
    "gated": lambda image, model, M, use_hires=True, tau=0.5: gated_partition_count(image, model, M, use_hires),
}


def overlay(image: np.ndarray, cmap: CountMap, alpha: float = 0.5) -> np.ndarray:
    """Red heat overlay of the count map on the image."""
    v = np.clip(cmap.values, 0, None)
    v = v / v.max() if v.max() > 0 else v
    heat = np.asarray(Image.fromarray((v * 255).astype(np.uint8)).resize((image.shape[1], image.shape[0]), Image.BILINEAR), float) / 255
    out = image.astype(float)
    out[..., 0] = (1 - alpha * heat) * out[..., 0] + alpha * heat * 255
    out[..., 1:] *= (1 - alpha * heat)[..., None]
    return np.clip(out, 0, 255).astype(np.uint8)
