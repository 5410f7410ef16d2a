"""Generation backends and builders for the three synthetic datasets.

Two interchangeable backends answer a :class:`GenRequest`:

* :class:`RemoteBackend` posts the request to an HTTP generation service
  (text-to-image, image-to-image, or outpainting when a mask is sent).
* :class:`OracleBackend` answers the same request with the scene renderer,
  so every image carries an exact object count.

The request shape decides the operation: no init image means
text-to-image, an init image without a mask means "fewer objects", and an
init image with a perimeter mask means "more objects".
"""

from __future__ import annotations

import base64
import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import httpx
import numpy as np
from PIL import Image

from . import scene_lab
from .manifest import ManifestWriter, save_image
from .models import DENSE, NO_CROWD, SPARSE
from .scene_lab import ImageSample, SceneSpec

log = logging.getLogger(__name__)


class GenError(RuntimeError):
    pass


class BadFraction(ValueError):
    pass


class BackendUnavailable(GenError):
    pass


class GenerationRejected(GenError):
    pass


def perimeter_mask(height: int, width: int, band_fraction: float = 1 / 3) -> np.ndarray:
    """Boolean mask that is True on a band of thickness ``floor(side * band_fraction)``."""
    if not 0.0 < band_fraction < 0.5:
        raise BadFraction(f"band_fraction must lie in (0, 0.5), got {band_fraction}")
    th, tw = scene_lab.band_thickness(height, width, band_fraction)
    mask = np.ones((height, width), dtype=bool)
    mask[th : height - th, tw : width - tw] = False
    return mask


@dataclass(frozen=True)
class GenRequest:
    """One generation call.

    ``hints`` carries the structured intent a remote service would read
    from the prompt (target count, density class); only the oracle uses it
    and it never goes over the wire.
    """

    prompt: str
    negative_prompt: str = ""
    init_image: Optional[ImageSample] = None
    mask: Optional[np.ndarray] = None
    seed: int = 0
    strength: float = 0.75
    hints: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask is not None:
            if self.init_image is None:
                raise ValueError("a mask requires an init image")
            if self.mask.shape != self.init_image.shape:
                raise ValueError(f"mask shape {self.mask.shape} != image shape {self.init_image.shape}")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError(f"strength must lie in (0, 1], got {self.strength}")

    def to_wire(self) -> dict:
        body = {
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt,
            "seed": int(self.seed),
            "strength": float(self.strength),
        }
        if self.init_image is not None:
            body["init_image_b64"] = encode_png(self.init_image.image)
        if self.mask is not None:
            body["mask_b64"] = encode_png((self.mask.astype(np.uint8) * 255))
        return body


def encode_png(array: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class CategoryPrompts:
    name: str = "people"
    target_terms: str = "pedestrians, humans, people, crowds"
    empty_prompt: str = "an empty place"
    more_prompt: str = "a crowd of people"
    count_template: str = "{count} people."
    density_templates: tuple[str, str, str] = ("{scene}", "a few people in a {scene}", "a dense crowd of people in a {scene}")


@dataclass(frozen=True)
class CountPromptCategory:
    prompt_count: int
    prompt_template: str = "{count} people."
    n_images: int = 150

    def __post_init__(self):
        if not 1 <= self.prompt_count <= 1000:
            raise ValueError(f"prompt_count must lie in [1, 1000], got {self.prompt_count}")
        if self.n_images < 1:
            raise ValueError("n_images must be positive")

    @property
    def prompt(self) -> str:
        return self.prompt_template.format(count=self.prompt_count)


DEFAULT_PROMPT_COUNTS = (1, 2, 3, 5, 8, 12, 18, 27, 40, 60, 90, 135, 200, 300, 450, 675, 1000)


def default_schedule(n_images: int = 150, counts: Sequence[int] = DEFAULT_PROMPT_COUNTS, template: str = "{count} people.") -> list[CountPromptCategory]:
    return [CountPromptCategory(c, template, n_images) for c in counts]


@dataclass(frozen=True)
class DensityCategory:
    label: int
    prompt_template: str


def density_categories(prompts: CategoryPrompts = CategoryPrompts()) -> list[DensityCategory]:
    return [DensityCategory(lbl, t) for lbl, t in zip((NO_CROWD, SPARSE, DENSE), prompts.density_templates)]


def scene_names() -> list[str]:
    text = resources.files("synthcount").joinpath("data/scene_names.txt").read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class GenConfig:
    prompts: CategoryPrompts = CategoryPrompts()
    band_fraction: float = 1 / 3
    # diffusion strength is a free setting passed through to the backend
    strength: float = 0.75


class Backend(Protocol):
    name: str

    def generate(self, req: GenRequest) -> ImageSample: ...


class OracleBackend:
    """Scene-renderer stand-in for a diffusion service; bit-exact.

    Text-to-image renders ``hints['count']`` objects, or a count drawn from
    the configured range of ``hints['density_label']``.  Object radius
    shrinks for high counts so that at most ``max_fill`` of the canvas is
    covered, mimicking how dense crowds appear as smaller people.
    """

    name = "oracle"

    def __init__(
        self,
        canvas: tuple[int, int] = (96, 96),
        object_style: str = "person",
        object_size: float = 3.5,
        size_gradient: float = 0.5,
        max_fill: float = 0.3,
        remove_fraction: tuple[float, float] = (0.15, 0.5),
        add_fraction: tuple[float, float] = (0.15, 0.5),
        sparse_range: tuple[int, int] = (1, 25),
        dense_range: tuple[int, int] = (60, 400),
        n_backgrounds: int = 16,
        label_noise: float = 0.0,
    ):
        self.canvas = tuple(canvas)
        self.object_style = object_style
        self.object_size = object_size
        self.size_gradient = size_gradient
        self.max_fill = max_fill
        self.remove_fraction = remove_fraction
        self.add_fraction = add_fraction
        self.sparse_range = sparse_range
        self.dense_range = dense_range
        self.n_backgrounds = n_backgrounds
        if label_noise < 0:
            raise ValueError("label_noise must be >= 0")
        self.label_noise = label_noise

    def density_label_for_count(self, count: int) -> int:
        """Audit mapping from a true count to a density class; gap counts are sparse."""
        if count == 0:
            return NO_CROWD
        return DENSE if count >= self.dense_range[0] else SPARSE

    def object_size_for(self, count: int) -> float:
        if count == 0:
            return self.object_size
        h, w = self.canvas
        return min(self.object_size, math.sqrt(self.max_fill * h * w / (math.pi * count)))

    def _k(self, rng: np.random.Generator, count: int, fraction: tuple[float, float]) -> int:
        return max(1, int(round(rng.uniform(*fraction) * count)))

    def generate(self, req: GenRequest) -> ImageSample:
        rng = np.random.default_rng([req.seed, 2654435761 % 2**31])
        if req.init_image is None:
            count = req.hints.get("count")
            if count is None:
                label = req.hints.get("density_label")
                if label is None:
                    raise GenerationRejected("oracle text-to-image needs a count or density_label hint")
                if label == NO_CROWD:
                    count = 0
                else:
                    lo, hi = self.sparse_range if label == SPARSE else self.dense_range
                    count = int(rng.integers(lo, hi + 1))
            elif count > 0 and self.label_noise > 0:
                # prompted counts are only approximately obeyed, worse for large counts
                count = max(1, int(round(count * math.exp(self.label_noise * rng.standard_normal()))))
            spec = SceneSpec(
                seed=req.seed,
                count=int(count),
                canvas=self.canvas,
                background_id=int(rng.integers(self.n_backgrounds)),
                object_style=self.object_style,
                size_gradient=self.size_gradient,
                object_size=self.object_size_for(int(count)),
            )
            out = scene_lab.render_scene(spec)
        elif req.mask is None:
            ref = req.init_image
            k = req.hints.get("k") or self._k(rng, ref.true_count, self.remove_fraction)
            out = scene_lab.remove_objects(ref, min(k, ref.true_count) if ref.true_count else k, seed=req.seed)
        else:
            ref = req.init_image
            band_fraction = float(req.hints.get("band_fraction", 1 / 3))
            if not np.array_equal(req.mask, perimeter_mask(*ref.shape, band_fraction)):
                raise GenerationRejected("oracle outpainting only supports perimeter masks")
            k = req.hints.get("k") or self._k(rng, max(ref.true_count, 1), self.add_fraction)
            out = scene_lab.add_objects(ref, k, band_fraction, seed=req.seed)
        return out


class RemoteBackend:
    """Client for an HTTP generation service.

    ``POST {base_url}/generate`` with JSON ``{prompt, negative_prompt,
    init_image_b64?, mask_b64?, seed, strength}``; the reply is
    ``{image_b64, backend_info}`` or ``{error}``.  Transport failures and
    5xx replies are retried with exponential backoff.
    """

    name = "remote"

    def __init__(
        self,
        base_url: str,
        timeout: float = 300.0,
        retries: int = 3,
        backoff: float = 1.0,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def generate(self, req: GenRequest) -> ImageSample:
        body = req.to_wire()
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(f"{self.base_url}/generate", json=body)
            except httpx.TransportError as e:
                last = e
                log.warning("generation attempt %d/%d failed: %s", attempt + 1, self.retries, e)
                continue
            if resp.status_code >= 500:
                last = GenError(f"HTTP {resp.status_code}")
                log.warning("generation attempt %d/%d got HTTP %d", attempt + 1, self.retries, resp.status_code)
                continue
            try:
                payload = resp.json()
            except ValueError as e:
                raise GenerationRejected(f"non-JSON reply (HTTP {resp.status_code})") from e
            if resp.status_code >= 400 or "error" in payload:
                raise GenerationRejected(str(payload.get("error", f"HTTP {resp.status_code}")))
            if "image_b64" not in payload:
                raise GenerationRejected("reply has no image_b64")
            info = payload.get("backend_info", "")
            return ImageSample(
                image=decode_png(payload["image_b64"]),
                true_count=None,
                source="generated",
                meta={"backend_info": info if isinstance(info, str) else repr(info)},
            )
        raise BackendUnavailable(f"{self.base_url} unreachable after {self.retries} attempts: {last}")


def _provenance(backend: Backend, req: GenRequest, **extra) -> dict[str, str]:
    meta = {
        "backend": backend.name,
        "prompt": req.prompt,
        "negative_prompt": req.negative_prompt,
        "seed": str(req.seed),
        "strength": repr(req.strength),
    }
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def generate_fewer(ref: ImageSample, backend: Backend, cfg: GenConfig = GenConfig(), seed: int = 0, k: int | None = None) -> ImageSample:
    """Image with fewer target objects than ``ref``."""
    req = GenRequest(
        prompt=cfg.prompts.empty_prompt,
        negative_prompt=cfg.prompts.target_terms,
        init_image=ref,
        seed=seed,
        strength=cfg.strength,
        hints={"k": k} if k else {},
    )
    out = backend.generate(req)
    out.meta.update(_provenance(backend, req, edit="fewer"))
    return out


def generate_more(ref: ImageSample, backend: Backend, cfg: GenConfig = GenConfig(), seed: int = 0, k: int | None = None) -> ImageSample:
    """Image with more target objects, outpainted into the perimeter band."""
    mask = perimeter_mask(*ref.shape, cfg.band_fraction)
    hints = {"band_fraction": cfg.band_fraction}
    if k:
        hints["k"] = k
    req = GenRequest(
        prompt=cfg.prompts.more_prompt,
        negative_prompt="",
        init_image=ref,
        mask=mask,
        seed=seed,
        strength=cfg.strength,
        hints=hints,
    )
    out = backend.generate(req)
    out.meta.update(_provenance(backend, req, edit="more", band_fraction=repr(cfg.band_fraction)))
    return out


@dataclass
class BuildResult:
    manifest: Path
    attempted: int = 0
    written: int = 0
    failed: int = 0
    failures: list[dict] = field(default_factory=list)

    def fail(self, n: int, what: str, err: Exception) -> None:
        log.warning("skipping %d row(s) for %s: %s", n, what, err)
        self.failed += n
        self.failures.append({"item": what, "rows": n, "error": f"{type(err).__name__}: {err}"})


def _fan_out(fn, items, workers: int):
    # ordered results keep manifests identical regardless of worker count
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _try(fn):
    def wrapped(item):
        try:
            return fn(item), None
        except (GenError, scene_lab.SceneError, ValueError) as e:
            return None, e

    return wrapped


def build_sorting_dataset(
    refs: Sequence[ImageSample],
    backend: Backend,
    out_dir: str | Path,
    n_minus: int = 4,
    n_plus: int = 4,
    cfg: GenConfig = GenConfig(),
    seed: int = 0,
    workers: int = 1,
) -> BuildResult:
    """Write ``n_minus * n_plus`` ranked triplets per reference image."""
    if not refs:
        raise ValueError("refs must be non-empty")
    out_dir = Path(out_dir)
    result = BuildResult(out_dir / "sorting.jsonl")

    def variants(i: int):
        ref = refs[i]
        base = (seed * 100003 + i) * 64
        fewer = [generate_fewer(ref, backend, cfg, seed=base + j) for j in range(n_minus)]
        more = [generate_more(ref, backend, cfg, seed=base + 32 + j) for j in range(n_plus)]
        return fewer, more

    outcomes = _fan_out(_try(variants), range(len(refs)), workers)
    with ManifestWriter(result.manifest, "sorting") as writer:
        for i, (res, err) in enumerate(outcomes):
            result.attempted += n_minus * n_plus
            if err is not None:
                result.fail(n_minus * n_plus, f"ref {i}", err)
                continue
            fewer, more = res
            ref_path = f"images/ref{i:05d}.png"
            save_image(refs[i].image, out_dir / ref_path)
            for j, f in enumerate(fewer):
                save_image(f.image, out_dir / f"images/ref{i:05d}_minus{j}.png")
            for m, g in enumerate(more):
                save_image(g.image, out_dir / f"images/ref{i:05d}_plus{m}.png")
            for j, f in enumerate(fewer):
                for m, g in enumerate(more):
                    row = {
                        "triplet_id": f"{i:05d}-{j}-{m}",
                        "paths": [f"images/ref{i:05d}_minus{j}.png", ref_path, f"images/ref{i:05d}_plus{m}.png"],
                        "ranks": [0, 1, 2],
                    }
                    if refs[i].true_count is not None and f.true_count is not None and g.true_count is not None:
                        row["true_counts"] = [f.true_count, refs[i].true_count, g.true_count]
                    writer.append(row)
        result.written = writer.rows_written
    return result


def build_count_dataset(
    schedule: Sequence[CountPromptCategory],
    zero_count: int,
    backend: Backend,
    out_dir: str | Path,
    cfg: GenConfig = GenConfig(),
    seed: int = 0,
    workers: int = 1,
) -> BuildResult:
    """Prompt-count dataset plus ``zero_count`` object-free scene images."""
    out_dir = Path(out_dir)
    result = BuildResult(out_dir / "count.jsonl")
    names = scene_names()
    rng = np.random.default_rng([seed, 911])
    jobs = []
    for cat in schedule:
        for n in range(cat.n_images):
            req = GenRequest(cat.prompt, "", seed=len(jobs) + seed * 1_000_003, strength=cfg.strength, hints={"count": cat.prompt_count})
            jobs.append((f"images/c{cat.prompt_count:04d}_{n:04d}.png", cat.prompt_count, req))
    for n in range(zero_count):
        scene = names[int(rng.integers(len(names)))]
        req = GenRequest(f"a photo of a {scene}", cfg.prompts.target_terms, seed=len(jobs) + seed * 1_000_003, strength=cfg.strength, hints={"count": 0})
        jobs.append((f"images/zero_{n:04d}.png", 0, req))

    outcomes = _fan_out(_try(lambda job: backend.generate(job[2])), jobs, workers)
    with ManifestWriter(result.manifest, "count") as writer:
        for (path, c, req), (sample, err) in zip(jobs, outcomes):
            result.attempted += 1
            if err is not None:
                result.fail(1, path, err)
                continue
            save_image(sample.image, out_dir / path)
            row = {"path": path, "prompt_count": c, "kept": True}
            if sample.true_count is not None:
                row["true_count"] = sample.true_count
            writer.append(row)
        result.written = writer.rows_written
    return result


def build_density_dataset(
    per_class: int,
    backend: Backend,
    out_dir: str | Path,
    zero_pool: Sequence[dict] = (),
    zero_pool_dir: str | Path | None = None,
    cfg: GenConfig = GenConfig(),
    seed: int = 0,
    workers: int = 1,
) -> BuildResult:
    """Three-class density dataset.

    ``zero_pool`` holds zero-count rows of a count manifest (paths relative
    to ``zero_pool_dir``); when given, they become the no-crowd class
    instead of generating new images.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    out_dir = Path(out_dir)
    result = BuildResult(out_dir / "density.jsonl")
    names = scene_names()
    rng = np.random.default_rng([seed, 1709])
    templates = cfg.prompts.density_templates
    jobs = []
    labels = (SPARSE, DENSE) if zero_pool else (NO_CROWD, SPARSE, DENSE)
    for label in labels:
        for n in range(per_class):
            scene = names[int(rng.integers(len(names)))]
            neg = cfg.prompts.target_terms if label == NO_CROWD else ""
            req = GenRequest(templates[label].format(scene=scene), neg, seed=len(jobs) + seed * 1_000_003 + 7, strength=cfg.strength, hints={"density_label": label})
            jobs.append((f"images/d{label}_{n:04d}.png", label, req))

    outcomes = _fan_out(_try(lambda job: backend.generate(job[2])), jobs, workers)
    with ManifestWriter(result.manifest, "density") as writer:
        for row in zero_pool:
            result.attempted += 1
            src = Path(row["path"])
            if not src.is_absolute() and zero_pool_dir is not None:
                src = Path(zero_pool_dir) / src
            out = {"path": os.path.relpath(src.resolve(), out_dir.resolve()), "density_label": NO_CROWD}
            if row.get("true_count") is not None:
                out["true_count"] = row["true_count"]
            writer.append(out)
        for (path, label, req), (sample, err) in zip(jobs, outcomes):
            result.attempted += 1
            if err is not None:
                result.fail(1, path, err)
                continue
            save_image(sample.image, out_dir / path)
            row = {"path": path, "density_label": label}
            if sample.true_count is not None:
                row["true_count"] = sample.true_count
            writer.append(row)
        result.written = writer.rows_written
    return result


def build_eval_dataset(
    n: int,
    count_range: tuple[int, int],
    out_dir: str | Path,
    canvas: tuple[int, int] = (192, 192),
    object_size: float = 7.0,
    object_style: str = "person",
    seed: int = 0,
) -> BuildResult:
    """Labelled test scenes rendered at ``canvas`` (the native resolution).

    Rows are ``{path, true_count}``.  Objects shrink automatically when a
    count would not fit at ``object_size``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = count_range
    if not 0 <= lo <= hi:
        raise ValueError(f"bad count_range {count_range}")
    out_dir = Path(out_dir)
    result = BuildResult(out_dir / "eval.jsonl")
    backend = OracleBackend(canvas=canvas, object_size=object_size, object_style=object_style)
    rng = np.random.default_rng([seed, 4409])
    with ManifestWriter(result.manifest, "eval") as writer:
        for i in range(n):
            count = int(rng.integers(lo, hi + 1))
            req = GenRequest(f"{count} people.", "", seed=seed * 1_000_003 + i, hints={"count": count})
            result.attempted += 1
            try:
                sample = backend.generate(req)
            except scene_lab.SceneError as e:
                result.fail(1, f"eval {i}", e)
                continue
            path = f"images/eval_{i:04d}.png"
            save_image(sample.image, out_dir / path)
            writer.append({"path": path, "true_count": sample.true_count})
        result.written = writer.rows_written
    return result
