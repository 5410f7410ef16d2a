"""Deterministic procedural scene renderer.

Draws a known number of textured objects on a procedural background and
supports exact add/remove edits, so every image comes with a true count.
All randomness is drawn from generators seeded by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

OBJECT_STYLES = ("person", "blob", "car")
SOURCES = ("rendered", "generated", "real")

# palettes per style: clothing / body colours
_PALETTES = {
    "person": np.array([[40, 40, 120], [150, 30, 30], [30, 110, 40], [20, 20, 20], [200, 170, 40], [110, 60, 140]], float),
    "blob": np.array([[220, 60, 60], [60, 60, 220], [240, 200, 40], [30, 160, 160]], float),
    "car": np.array([[200, 30, 30], [230, 230, 230], [20, 20, 30], [40, 80, 170], [120, 120, 120]], float),
}
_MAX_PLACEMENT_TRIES = 400


class SceneError(ValueError):
    pass


class CanvasTooSmall(SceneError):
    pass


class TooFewObjects(SceneError):
    pass


class BandFull(SceneError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a rendered scene.

    ``object_size`` is the base object radius in pixels at the bottom of the
    canvas; objects shrink toward the top by up to ``size_gradient / 2``.
    Two objects may overlap by at most ``max_overlap`` of the sum of their
    bounding radii.
    """

    seed: int
    count: int
    canvas: tuple[int, int] = (96, 96)
    background_id: int = 0
    object_style: str = "person"
    size_gradient: float = 0.5
    object_size: float = 3.5
    max_overlap: float = 0.2

    def __post_init__(self):
        if self.count < 0:
            raise SceneError(f"count must be non-negative, got {self.count}")
        if min(self.canvas) < 32:
            raise SceneError(f"canvas must be at least 32x32, got {self.canvas}")
        if self.object_style not in OBJECT_STYLES:
            raise SceneError(f"unknown object_style {self.object_style!r}")
        if not 0.0 <= self.size_gradient <= 1.0:
            raise SceneError("size_gradient must lie in [0, 1]")
        if not 0.0 <= self.max_overlap < 1.0:
            raise SceneError("max_overlap must lie in [0, 1)")
        if self.object_size <= 0:
            raise SceneError("object_size must be positive")


@dataclass(frozen=True)
class Blob:
    cy: float
    cx: float
    ry: float
    rx: float
    color: tuple[float, float, float]
    texture_seed: int

    @property
    def radius(self) -> float:
        return max(self.ry, self.rx)


@dataclass(frozen=True)
class SceneLayout:
    """Everything needed to re-render a scene exactly."""

    canvas: tuple[int, int]
    background_id: int
    object_style: str
    size_gradient: float
    object_size: float
    max_overlap: float
    blobs: tuple[Blob, ...] = ()

    @property
    def count(self) -> int:
        return len(self.blobs)


@dataclass
class ImageSample:
    image: np.ndarray
    true_count: Optional[int] = None
    source: str = "rendered"
    path: str = ""
    meta: dict[str, str] = field(default_factory=dict)
    layout: Optional[SceneLayout] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "rendered" and self.true_count is None:
            raise ValueError("rendered samples must carry a true_count")
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ValueError(f"image must be HxWx3 uint8, got {self.image.shape} {self.image.dtype}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


def _scale_at(y: float, height: int, size_gradient: float) -> float:
    # 1 at the bottom edge, 1 - g/2 at the top edge
    return 1.0 - 0.5 * size_gradient * (1.0 - y / height)


def _make_blob(rng: np.random.Generator, cy: float, cx: float, radius: float, style: str) -> Blob:
    palette = _PALETTES[style]
    color = palette[rng.integers(len(palette))] * rng.uniform(0.8, 1.1)
    if style == "person":
        ry, rx = radius, radius * 0.65
    elif style == "car":
        ry, rx = radius * 0.6, radius
    else:
        aspect = rng.uniform(0.8, 1.0)
        ry, rx = (radius, radius * aspect) if rng.random() < 0.5 else (radius * aspect, radius)
    return Blob(float(cy), float(cx), float(ry), float(rx), tuple(np.clip(color, 0, 255).tolist()), int(rng.integers(2**31)))


def _fits(cy, cx, r, blobs: Sequence[Blob], max_overlap: float) -> bool:
    if not blobs:
        return True
    c = np.array([[b.cy, b.cx, b.radius] for b in blobs])
    d = np.hypot(c[:, 0] - cy, c[:, 1] - cx)
    # one pixel of clearance keeps max_overlap=0 objects from touching after rasterisation
    return bool(np.all(d >= (1.0 - max_overlap) * (c[:, 2] + r) + 1.0))


def _place(
    rng: np.random.Generator,
    layout: SceneLayout,
    existing: list[Blob],
    k: int,
    region=None,
    error=CanvasTooSmall,
) -> list[Blob]:
    """Rejection-sample ``k`` new objects that respect the overlap budget."""
    h, w = layout.canvas
    placed = list(existing)
    new = []
    for _ in range(k):
        for _ in range(_MAX_PLACEMENT_TRIES):
            cy = rng.uniform(0, h)
            r = layout.object_size * _scale_at(cy, h, layout.size_gradient) * rng.uniform(0.85, 1.15)
            # keep the whole object on the canvas
            cy = min(max(cy, r + 1), h - r - 1)
            cx = rng.uniform(r + 1, w - r - 1)
            if region is not None and not region(cy, cx):
                continue
            if _fits(cy, cx, r, placed, layout.max_overlap):
                blob = _make_blob(rng, cy, cx, r, layout.object_style)
                placed.append(blob)
                new.append(blob)
                break
        else:
            raise error(
                f"could not place object {len(new) + 1}/{k} on a {h}x{w} canvas "
                f"holding {len(placed)} objects (max_overlap={layout.max_overlap})"
            )
    return new


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def render_background(background_id: int, canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    rng = np.random.default_rng([background_id, 7919])
    top = rng.uniform(90, 200, 3)
    bottom = rng.uniform(70, 170, 3)
    t = np.linspace(0.0, 1.0, h)[:, None, None]
    img = top * (1 - t) + bottom * t
    img = np.broadcast_to(img, (h, w, 3)).copy()
    img += 14.0 * _smooth_noise(rng, h, w, 4)[..., None]
    img += 5.0 * _smooth_noise(rng, h, w, max(4, min(h, w) // 8))[..., None] * rng.uniform(0.5, 1.5, 3)
    return img


def _draw(img: np.ndarray, labels: np.ndarray, blob: Blob, label: int, style: str) -> None:
    h, w = labels.shape
    y0, y1 = max(int(math.floor(blob.cy - blob.ry)), 0), min(int(math.ceil(blob.cy + blob.ry)) + 1, h)
    x0, x1 = max(int(math.floor(blob.cx - blob.rx)), 0), min(int(math.ceil(blob.cx + blob.rx)) + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy = (yy + 0.5 - blob.cy) / blob.ry
    dx = (xx + 0.5 - blob.cx) / blob.rx
    e = dy**2 + dx**2
    inside = e <= 1.0
    if not inside.any():
        # sub-pixel object: mark the centre pixel so it stays countable
        inside = np.zeros_like(e, dtype=bool)
        iy = min(max(int(blob.cy), y0), y1 - 1) - y0
        ix = min(max(int(blob.cx), x0), x1 - 1) - x0
        inside[iy, ix] = True
    rng = np.random.default_rng(blob.texture_seed)
    color = np.asarray(blob.color)
    shade = (1.0 - 0.45 * e)[..., None] * color
    shade += rng.normal(0, 10, shade.shape)
    if style == "person":
        # lighter head spot in the upper part of the body
        head = (dy + 0.55) ** 2 + (dx * 0.65) ** 2 <= 0.16
        shade[head] = np.array([225, 185, 150]) * rng.uniform(0.8, 1.05)
    elif style == "car":
        window = (np.abs(dy) < 0.35) & (np.abs(dx - 0.15) < 0.35)
        shade[window] = np.array([60, 90, 120])
    patch = img[y0:y1, x0:x1]
    patch[inside] = shade[inside]
    labels[y0:y1, x0:x1][inside] = label


def render_layout(layout: SceneLayout) -> tuple[np.ndarray, np.ndarray]:
    """Render ``layout`` to an 8-bit RGB image and an instance-label map.

    Label 0 is background and object ``i`` of ``layout.blobs`` has label
    ``i + 1``.  Later objects paint over earlier ones where they overlap.
    """
    img = render_background(layout.background_id, layout.canvas)
    labels = np.zeros(layout.canvas, dtype=np.int32)
    for i, blob in enumerate(layout.blobs):
        _draw(img, labels, blob, i + 1, layout.object_style)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), labels


def object_mask(sample: ImageSample) -> np.ndarray:
    """Boolean mask of object pixels, re-derived from the sample's layout."""
    if sample.layout is None:
        raise SceneError("sample has no layout; only rendered samples carry object masks")
    return render_layout(sample.layout)[1] > 0


def _sample_from_layout(layout: SceneLayout, meta: dict[str, str]) -> ImageSample:
    image, _ = render_layout(layout)
    return ImageSample(image=image, true_count=layout.count, source="rendered", meta=meta, layout=layout)


def render_scene(spec: SceneSpec) -> ImageSample:
    """Render ``spec``; identical specs give byte-identical images."""
    rng = np.random.default_rng([spec.seed, spec.count, 104729])
    layout = SceneLayout(
        canvas=tuple(spec.canvas),
        background_id=spec.background_id,
        object_style=spec.object_style,
        size_gradient=spec.size_gradient,
        object_size=spec.object_size,
        max_overlap=spec.max_overlap,
    )
    blobs = _place(rng, layout, [], spec.count)
    layout = replace(layout, blobs=tuple(blobs))
    meta = {"seed": str(spec.seed), "count": str(spec.count), "background_id": str(spec.background_id)}
    return _sample_from_layout(layout, meta)


def _require_layout(sample: ImageSample) -> SceneLayout:
    if sample.source != "rendered" or sample.layout is None:
        raise SceneError("exact add/remove needs a rendered sample with its layout")
    return sample.layout


def remove_objects(sample: ImageSample, k: int, seed: int) -> ImageSample:
    """Remove ``k`` randomly chosen objects; the rest keep their positions."""
    layout = _require_layout(sample)
    if k < 1:
        raise SceneError(f"k must be positive, got {k}")
    if k > layout.count:
        raise TooFewObjects(f"cannot remove {k} objects from a scene with {layout.count}")
    rng = np.random.default_rng([seed, layout.count, k, 15485863])
    drop = set(rng.choice(layout.count, size=k, replace=False).tolist())
    kept = tuple(b for i, b in enumerate(layout.blobs) if i not in drop)
    meta = dict(sample.meta, edit="remove", k=str(k), edit_seed=str(seed))
    return _sample_from_layout(replace(layout, blobs=kept), meta)


def band_thickness(height: int, width: int, band_fraction: float) -> tuple[int, int]:
    """Perimeter band thickness (rows, cols) for a fraction of each side."""
    return int(math.floor(height * band_fraction)), int(math.floor(width * band_fraction))


def in_band(cy: float, cx: float, height: int, width: int, band_fraction: float) -> bool:
    th, tw = band_thickness(height, width, band_fraction)
    return cy < th or cy >= height - th or cx < tw or cx >= width - tw


def add_objects(sample: ImageSample, k: int, band_fraction: float, seed: int) -> ImageSample:
    """Add ``k`` objects whose centres lie in the perimeter band."""
    layout = _require_layout(sample)
    if k < 1:
        raise SceneError(f"k must be positive, got {k}")
    if not 0.0 < band_fraction < 0.5:
        raise SceneError(f"band_fraction must lie in (0, 0.5), got {band_fraction}")
    h, w = layout.canvas
    rng = np.random.default_rng([seed, layout.count, k, 32452843])
    new = _place(
        rng,
        layout,
        list(layout.blobs),
        k,
        region=lambda cy, cx: in_band(cy, cx, h, w, band_fraction),
        error=BandFull,
    )
    meta = dict(sample.meta, edit="add", k=str(k), edit_seed=str(seed), band_fraction=repr(band_fraction))
    return _sample_from_layout(replace(layout, blobs=layout.blobs + tuple(new)), meta)


@dataclass(frozen=True)
class RankedTriplet:
    """(fewer, ref, more) with rank labels 0, 1, 2."""

    fewer: ImageSample
    ref: ImageSample
    more: ImageSample
    triplet_id: str = ""
    ranks: tuple[int, int, int] = (0, 1, 2)

    @property
    def samples(self) -> tuple[ImageSample, ImageSample, ImageSample]:
        return self.fewer, self.ref, self.more


def edit_sizes(count: int, n: int, fraction_range: tuple[float, float], choices: Optional[Sequence[int]] = None) -> list[int]:
    """Number of objects to add or remove for each of ``n`` variants."""
    if choices is not None:
        return [int(choices[j % len(choices)]) for j in range(n)]
    lo, hi = fraction_range
    fracs = np.linspace(lo, hi, n) if n > 1 else np.array([(lo + hi) / 2])
    return [max(1, int(round(f * count))) for f in fracs]


def make_triplets(
    ref: ImageSample,
    n_minus: int = 4,
    n_plus: int = 4,
    *,
    seed: int = 0,
    band_fraction: float = 1 / 3,
    remove_fraction: tuple[float, float] = (0.15, 0.5),
    add_fraction: tuple[float, float] = (0.15, 0.5),
    remove_k: Optional[Sequence[int]] = None,
    add_k: Optional[Sequence[int]] = None,
) -> list[RankedTriplet]:
    """All ``n_minus * n_plus`` ordered triplets around ``ref``.

    Removal sizes never exceed the reference count, so a single-object
    reference yields empty "fewer" variants.
    """
    if n_minus < 1 or n_plus < 1:
        raise SceneError("n_minus and n_plus must be >= 1")
    count = _require_layout(ref).count
    ks_minus = [min(k, count) for k in edit_sizes(count, n_minus, remove_fraction, remove_k)]
    ks_plus = edit_sizes(max(count, 1), n_plus, add_fraction, add_k)
    fewer = [remove_objects(ref, k, seed=seed * 1000 + j) for j, k in enumerate(ks_minus)]
    more = [add_objects(ref, k, band_fraction, seed=seed * 1000 + 500 + j) for j, k in enumerate(ks_plus)]
    return [
        RankedTriplet(f, ref, m, triplet_id=f"{seed}-{j}-{i}")
        for j, f in enumerate(fewer)
        for i, m in enumerate(more)
    ]
