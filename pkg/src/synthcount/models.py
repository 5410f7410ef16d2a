"""Encoder and heads for sorting, counting and density classification."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

DENSITY_CLASSES = ("no_crowd", "sparse", "dense")
NO_CROWD, SPARSE, DENSE = 0, 1, 2


class BadShape(ValueError):
    pass


@dataclass
class EncoderConfig:
    """Encoder hyperparameters.

    The defaults are desk scale.  Full scale would be ``feature_dim=2048``,
    ``downsample_factor=32`` and ``input_size=384`` on a deeper backbone.
    """

    feature_dim: int = 64
    downsample_factor: int = 8
    input_size: int = 96
    widths: tuple[int, ...] = (8, 16, 32)
    weights_id: str = ""
    # side of the box blur subtracted from the input; 0 disables the high-pass
    highpass: int = 9
    # side of the feature-cell neighbourhood the density head sees per cell
    density_context: int = 5

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        d = self.downsample_factor
        if d < 1 or d & (d - 1):
            raise ValueError(f"downsample_factor must be a power of 2, got {d}")
        if int(math.log2(d)) > 5:
            raise ValueError("downsample_factor above 32 is not supported")
        if len(self.widths) != 3:
            raise ValueError("widths lists the channel counts of the first three stages")
        if self.highpass < 0 or (self.highpass and self.highpass % 2 == 0):
            raise ValueError(f"highpass must be 0 or an odd kernel size, got {self.highpass}")
        if self.density_context < 1 or self.density_context % 2 == 0:
            raise ValueError(f"density_context must be an odd size >= 1, got {self.density_context}")
        if self.input_size % d:
            raise BadShape(f"input_size {self.input_size} is not divisible by {d}")

    @property
    def grid(self) -> int:
        return self.input_size // self.downsample_factor


def _stage(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, padding_mode="replicate"),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, 1, 1, padding_mode="replicate"),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Four-stage strided conv net returning a spatial feature map.

    Inputs are float images in [0, 1], shape (B, 3, H, W).  Per-channel
    normalisation statistics live in buffers so they travel with the
    weights.  Replicate padding keeps a constant image mapping to a
    spatially constant feature map.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        n_down = int(math.log2(cfg.downsample_factor))
        strides = [2 if i < n_down else 1 for i in range(4)]
        stem_stride = 2 if n_down > 4 else 1
        w1, w2, w3 = cfg.widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, w1, 3, stem_stride, 1, padding_mode="replicate"), nn.ReLU(inplace=True)
        )
        self.stages = nn.Sequential(
            _stage(w1, w1, strides[0]),
            _stage(w1, w2, strides[1]),
            _stage(w2, w3, strides[2]),
            _stage(w3, cfg.feature_dim, strides[3]),
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                # default conv biases add a shared offset that swamps image-dependent
                # variation in pooled features (pairwise cosines ~0.99995 at init)
                nn.init.zeros_(m.bias)
        self.register_buffer("pixel_mean", torch.full((3,), 0.5))
        self.register_buffer("pixel_std", torch.full((3,), 0.25))

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]) -> None:
        self.pixel_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.pixel_std.copy_(torch.as_tensor(std, dtype=torch.float32).clamp_min(1e-3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.cfg.downsample_factor
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[-1] % d or x.shape[-2] % d:
            raise BadShape(f"expected (B, 3, H, W) with H, W divisible by {d}, got {tuple(x.shape)}")
        x = (x - self.pixel_mean[:, None, None]) / self.pixel_std[:, None, None]
        k = self.cfg.highpass
        if k:
            # local contrast: removes smooth background shading, keeps small objects
            x = x - box_mean(x, k)
        return self.stages(self.stem(x))


def box_mean(x: torch.Tensor, k: int) -> torch.Tensor:
    """Same-size k x k box average of a (B, C, H, W) tensor, replicate padded."""
    if k == 1:
        return x
    x = F.pad(x, (k // 2,) * 4, mode="replicate")
    return F.avg_pool2d(F.avg_pool2d(x, (1, k), stride=1), (k, 1), stride=1)


def pool(z: torch.Tensor) -> torch.Tensor:
    """Global average over the two spatial axes of a (..., C, H, W) map."""
    return z.mean(dim=(-2, -1))


def resize_image(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    if isinstance(size, int):
        size = (size, size)
    if image.shape[:2] == tuple(size):
        return image
    return np.asarray(Image.fromarray(image).resize((size[1], size[0]), Image.BILINEAR))


def to_tensor(images, size: Optional[int] = None) -> torch.Tensor:
    """uint8 HxWx3 array(s) -> float tensor (B, 3, H, W) in [0, 1]."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arrs = [resize_image(im, size) if size else im for im in images]
    x = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).float()
    return x / 255.0


def checksum(module: nn.Module) -> str:
    """sha256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class CountingModel:
    """Encoder plus the three heads; the unit saved as a checkpoint.

    Count-map bias convention: the count head's bias is added once per
    image, not once per feature cell, so the per-cell map sums exactly to
    the pooled prediction.
    """

    encoder: Encoder
    sort_head: nn.Linear
    count_head: nn.Linear
    density_head: nn.Linear
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: Optional[EncoderConfig] = None, seed: int = 0) -> "CountingModel":
        cfg = cfg or EncoderConfig()
        torch.manual_seed(seed)
        enc = Encoder(cfg)
        heads = [nn.Linear(cfg.feature_dim, 1), nn.Linear(cfg.feature_dim, 1), nn.Linear(cfg.feature_dim, 3)]
        for head in heads:
            nn.init.zeros_(head.bias)
        model = cls(enc, *heads)
        model.eval()
        return model

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def modules(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "sort_head": self.sort_head,
            "count_head": self.count_head,
            "density_head": self.density_head,
        }

    def eval(self) -> "CountingModel":
        for m in self.modules().values():
            m.eval()
        return self

    def prepare(self, images) -> torch.Tensor:
        return to_tensor(images, self.cfg.input_size)

    @torch.no_grad()
    def encode(self, images, batch_size: int = 64) -> torch.Tensor:
        """Feature maps (B, C, H, W) for uint8 images resized to input size."""
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = [images]
        out = []
        for i in range(0, len(images), batch_size):
            out.append(self.encoder(self.prepare(images[i : i + batch_size])))
        return torch.cat(out)

    @torch.no_grad()
    def pooled(self, images, batch_size: int = 64) -> torch.Tensor:
        return pool(self.encode(images, batch_size))

    def density_cells(self, z: torch.Tensor) -> torch.Tensor:
        """Per-cell density features: each cell averaged with its neighbourhood."""
        squeeze = z.ndim == 3
        out = box_mean(z[None] if squeeze else z, self.cfg.density_context)
        return out[0] if squeeze else out

    @torch.no_grad()
    def predict_count(self, images) -> np.ndarray:
        return self.count_head(self.pooled(images)).squeeze(-1).double().numpy()

    @torch.no_grad()
    def predict_rank(self, images) -> np.ndarray:
        return self.sort_head(self.pooled(images)).squeeze(-1).double().numpy()

    @torch.no_grad()
    def predict_density(self, images) -> np.ndarray:
        return self.density_head(self.pooled(images)).argmax(-1).numpy()

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, module in self.modules().items():
            torch.save(module.state_dict(), directory / f"{name}.pt")
        manifest = {
            "encoder_config": asdict(self.cfg),
            "normalization": {
                "mean": self.encoder.pixel_mean.tolist(),
                "std": self.encoder.pixel_std.tolist(),
            },
            "checksums": {name: checksum(m) for name, m in self.modules().items()},
            "meta": self.meta,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "CountingModel":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = cls.create(EncoderConfig(**manifest["encoder_config"]))
        for name, module in model.modules().items():
            module.load_state_dict(torch.load(directory / f"{name}.pt", weights_only=True))
        model.meta = manifest.get("meta", {})
        return model.eval()

