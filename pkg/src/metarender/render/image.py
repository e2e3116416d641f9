"""HDR and display images, tone mapping, and PFM/PNG persistence."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

SRGB_THRESHOLD = 0.0031308


@dataclass(frozen=True, eq=False)
class HDRImage:
    """Linear radiance, (H, W, 3) float64, row 0 at the top."""

    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) data, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, HDRImage) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DisplayImage:
    """Tone-mapped sRGB values in [0, 1], (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) data, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, DisplayImage) and np.array_equal(self.data, other.data)

    __hash__ = None


def srgb_encode(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    hi = 1.055 * np.power(np.maximum(y, SRGB_THRESHOLD), 1.0 / 2.4) - 0.055
    return np.where(y <= SRGB_THRESHOLD, 12.92 * y, hi)


def tonemap_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.clip(srgb_encode(x / (1.0 + x)), 0.0, 1.0)


def tonemap(img: HDRImage) -> DisplayImage:
    """Per-channel Reinhard x/(1+x) followed by the sRGB transfer curve."""
    bad = ~np.isfinite(img.data)
    if bad.any():
        r, c, ch = np.argwhere(bad)[0]
        raise ValueError(f"non-finite radiance at pixel (row {r}, col {c}), channel {ch}")
    if (img.data < 0).any():
        r, c, ch = np.argwhere(img.data < 0)[0]
        raise ValueError(f"negative radiance at pixel (row {r}, col {c}), channel {ch}")
    return DisplayImage(tonemap_array(img.data))


def tonemap_torch(x: torch.Tensor) -> torch.Tensor:
    """Differentiable tone map; on the joint the linear branch is taken."""
    y = x / (1.0 + x)
    hi = 1.055 * torch.pow(torch.clamp(y, min=SRGB_THRESHOLD), 1.0 / 2.4) - 0.055
    return torch.clamp(torch.where(y <= SRGB_THRESHOLD, 12.92 * y, hi), 0.0, 1.0)


def write_pfm(path, img: HDRImage) -> None:
    """Colour PFM, little-endian (negative scale), rows stored bottom to top."""
    h, w, _ = img.data.shape
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.data[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> HDRImage:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(w * h * ch * 4), dtype=dtype).reshape(h, w, ch)
    data = data[::-1].astype(np.float64)
    if ch == 1:
        data = np.repeat(data, 3, axis=2)
    return HDRImage(data)


def quantize(img: DisplayImage) -> np.ndarray:
    return np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: DisplayImage) -> None:
    Image.fromarray(quantize(img), mode="RGB").save(Path(path))


def read_png(path) -> DisplayImage:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return DisplayImage(arr)
