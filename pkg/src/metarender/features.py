"""Frozen, differentiable image feature extractors.

The convolutional network uses pseudo-random weights generated once from a
fixed seed and stored in ``data/tinyconv_v1.bin``; random frozen features are
cheap to run and to check against finite differences.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as Fn

from .render.image import DisplayImage

DTYPE = torch.float64
WEIGHT_MAGIC = b"MRTW"
WEIGHT_VERSION = 1
WEIGHT_SEED = 20240611
DEFAULT_WEIGHTS = Path(__file__).parent / "data" / "tinyconv_v1.bin"
CHANNELS = (8, 16, 32)
LATENT_DIM = 128
LEAK = 0.1
SPHERE_EPS = 1e-8


class WeightFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Weight file


def write_weights(path, tensors: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_VERSION, len(tensors)))
        for t in tensors:
            t = np.ascontiguousarray(t, dtype="<f4")
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(t.tobytes())


def read_weights(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    off = 12
    out = []
    for _ in range(count):
        if off + 4 > len(data):
            raise WeightFileError(f"{path}: truncated header")
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if off + 4 * n > len(data):
            raise WeightFileError(f"{path}: truncated tensor data")
        out.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy())
        off += 4 * n
    if off != len(data):
        raise WeightFileError(f"{path}: {len(data) - off} trailing bytes")
    return out


def generate_weights(seed: int = WEIGHT_SEED) -> list[np.ndarray]:
    """He-scaled Gaussian conv kernels, small biases, Gaussian projection."""
    rng = np.random.default_rng(seed)
    tensors, cin = [], 3
    for cout in CHANNELS:
        tensors.append(rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3)))
        tensors.append(rng.normal(0.0, 0.05, cout))
        cin = cout
    tensors.append(rng.normal(0.0, np.sqrt(1.0 / cin), (LATENT_DIM, cin)))
    tensors.append(np.zeros(LATENT_DIM))
    return [t.astype(np.float32) for t in tensors]


def weights_hash(path=DEFAULT_WEIGHTS) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Extractors


def _as_chw(img) -> torch.Tensor:
    if isinstance(img, DisplayImage):
        img = img.data
    t = img if isinstance(img, torch.Tensor) else torch.as_tensor(np.asarray(img, dtype=np.float64))
    if t.ndim != 3 or t.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1).unsqueeze(0).to(DTYPE)


@dataclass(frozen=True)
class PixelFlatten:
    factor: int = 1
    id: str = "pixel"
    produces_latent = True

    def forward(self, img) -> torch.Tensor:
        x = _as_chw(img)
        h, w = x.shape[2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"image {h}x{w} not divisible by downsample factor {self.factor}")
        if self.factor > 1:
            x = Fn.avg_pool2d(x, self.factor)
        return x[0].permute(1, 2, 0).reshape(-1)


@dataclass(frozen=True, eq=False)
class TinyConvNet:
    weights: tuple
    id: str = "tinyconv"
    produces_latent = True

    @staticmethod
    def load(path=DEFAULT_WEIGHTS) -> "TinyConvNet":
        ws = read_weights(path)
        if len(ws) != 2 * len(CHANNELS) + 2:
            raise WeightFileError(f"{path}: expected {2 * len(CHANNELS) + 2} tensors, got {len(ws)}")
        cin = 3
        for k, cout in enumerate(CHANNELS):
            if ws[2 * k].shape != (cout, cin, 3, 3) or ws[2 * k + 1].shape != (cout,):
                raise WeightFileError(f"{path}: conv layer {k} has shape {ws[2 * k].shape}")
            cin = cout
        if ws[-2].shape[1] != cin or ws[-1].shape != (ws[-2].shape[0],):
            raise WeightFileError(f"{path}: projection shape {ws[-2].shape}")
        ts = []
        for w in ws:
            if not np.all(np.isfinite(w)):
                raise WeightFileError(f"{path}: non-finite weights")
            t = torch.as_tensor(w.astype(np.float64))
            t.requires_grad_(False)
            ts.append(t)
        return TinyConvNet(tuple(ts))

    @property
    def dim(self) -> int:
        return int(self.weights[-2].shape[0])

    def activations(self, img) -> list[torch.Tensor]:
        x = _as_chw(img) - 0.5
        acts = []
        for k in range(len(CHANNELS)):
            x = Fn.leaky_relu(Fn.conv2d(x, self.weights[2 * k], self.weights[2 * k + 1], stride=2, padding=1), LEAK)
            acts.append(x)
        return acts

    def forward(self, img) -> torch.Tensor:
        pooled = self.activations(img)[-1].mean(dim=(2, 3))[0]
        return self.weights[-2] @ pooled + self.weights[-1]


@dataclass(frozen=True, eq=False)
class MultiLayerPerceptual:
    backbone: TinyConvNet
    layer_weights: tuple = (1.0 / 3, 1.0 / 3, 1.0 / 3)
    id: str = "perceptual"
    produces_latent = False

    def __post_init__(self):
        if len(self.layer_weights) != len(CHANNELS) or any(w < 0 for w in self.layer_weights):
            raise ValueError("perceptual layer weights must be non-negative, one per layer")

    def distance(self, a, b) -> torch.Tensor:
        ta, tb = _as_chw(a), _as_chw(b)
        if ta.shape != tb.shape:
            raise ValueError(f"image dimensions differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
        total = torch.zeros((), dtype=DTYPE)
        for w, fa, fb in zip(self.layer_weights, self.backbone.activations(a), self.backbone.activations(b)):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
            total = total + w * ((na - nb) ** 2).sum(dim=1).mean()
        return total


@lru_cache(maxsize=None)
def get_extractor(extractor_id: str):
    if extractor_id == "pixel":
        return PixelFlatten(factor=4)
    if extractor_id == "tinyconv":
        return TinyConvNet.load()
    if extractor_id == "perceptual":
        return MultiLayerPerceptual(TinyConvNet.load())
    raise KeyError(f"unknown extractor {extractor_id!r}; registered: {', '.join(REGISTRY)}")


REGISTRY = ("pixel", "tinyconv", "perceptual")


def extract(spec, img) -> np.ndarray:
    """Latent vector of a display image."""
    if isinstance(spec, str):
        spec = get_extractor(spec)
    with torch.no_grad():
        return spec.forward(img).numpy().copy()


def perceptual_distance(spec, a, b) -> float:
    if isinstance(spec, str):
        spec = get_extractor(spec)
    with torch.no_grad():
        return float(spec.distance(a, b))


def normalize_to_sphere(z, eps: float = SPHERE_EPS):
    if isinstance(z, torch.Tensor):
        return z / (z.norm() + eps)
    z = np.asarray(z, dtype=np.float64)
    return z / (np.linalg.norm(z) + eps)


# ---------------------------------------------------------------------------
# Loss plumbing


def target_data(extractor_id: str, target_display) -> torch.Tensor:
    """What the feature loss compares to: a latent, or the display image itself for perceptual."""
    ext = get_extractor(extractor_id)
    t = torch.as_tensor(target_display.data if isinstance(target_display, DisplayImage) else target_display)
    if not ext.produces_latent:
        return t.to(DTYPE)
    with torch.no_grad():
        return ext.forward(t)


def feature_loss(extractor_id: str, display: torch.Tensor, target) -> torch.Tensor:
    """1 - hypersphere similarity for latent extractors, the perceptual distance otherwise."""
    ext = get_extractor(extractor_id)
    target = torch.as_tensor(target)
    if not ext.produces_latent:
        if target.ndim == 1:
            raise ValueError("perceptual loss needs a target image, not a latent")
        return ext.distance(display, target)
    if target.ndim != 1:
        target = target_data(extractor_id, target)
    z = ext.forward(display)
    if z.shape != target.shape:
        raise ValueError(f"latent dimension {z.shape[0]} differs from target {target.shape[0]}")
    return 1.0 - (normalize_to_sphere(z) * normalize_to_sphere(target)).sum()


def similarity(extractor_id: str, display, target) -> float:
    """Logged similarity: hypersphere similarity, or 1 - distance for the perceptual extractor."""
    with torch.no_grad():
        return 1.0 - float(feature_loss(extractor_id, _as_chw(display)[0].permute(1, 2, 0), target))
