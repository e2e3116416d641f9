"""Counter-based random streams and environment-light lookup / importance sampling."""
from __future__ import annotations

import math

import numpy as np

from ..scene import ConstantEnv, LatLongEnv

UNIFORMS_PER_BOUNCE = 6
CAMERA_SLOT = 1023

# stream domains keep the primary image, dual buffers and edge samples apart
DOMAIN_IMAGE = 0
DOMAIN_PRIMARY_EDGE = 1
DOMAIN_SECONDARY_EDGE = 2


def stream_uniforms(seed: int, stream: int, slot: int, n: int, k: int) -> np.ndarray:
    """(n, k) uniforms in [0, 1) from a Philox stream keyed by (seed, stream, slot)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, ((stream << 10) | slot) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).random((n, k))


def stream_id(domain: int, tile: int, block: int) -> int:
    return (domain << 44) | (tile << 22) | block


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.2126, 0.7152, 0.0722])


class EnvSampler:
    """Radiance lookup and direction sampling for the single environment light.

    LatLong maps use y up: direction (sin t sin p, cos t, -sin t cos p) with
    p = 2 pi u - rotation and t = pi v, looked up with nearest filtering.
    """

    def __init__(self, env):
        self.env = env
        if isinstance(env, ConstantEnv):
            self.constant = env.radiance.copy()
            return
        if not isinstance(env, LatLongEnv):
            raise TypeError(f"unsupported environment {type(env).__name__}")
        self.constant = None
        img = env.image
        self.h, self.w = img.shape[:2]
        self.img = img
        sin_t = np.sin((np.arange(self.h) + 0.5) / self.h * math.pi)
        weight = luminance(img) * sin_t[:, None]
        total = weight.sum()
        if not total > 0:
            weight = np.broadcast_to(sin_t[:, None], (self.h, self.w)).copy()
            total = weight.sum()
        self.weight = weight / total
        row = self.weight.sum(axis=1)
        self.row_cdf = np.concatenate([[0.0], np.cumsum(row)])
        self.row_cdf[-1] = 1.0
        cond = self.weight / np.where(row > 0, row, 1.0)[:, None]
        self.col_cdf = np.concatenate([np.zeros((self.h, 1)), np.cumsum(cond, axis=1)], axis=1)
        self.col_cdf[:, -1] = 1.0
        self.flat_cdf = (self.col_cdf + np.arange(self.h)[:, None]).ravel()

    def _uv(self, d):
        theta = np.arccos(np.clip(d[:, 1], -1.0, 1.0))
        phi = np.arctan2(d[:, 0], -d[:, 2])
        u = ((phi + self.env.rotation) / (2 * math.pi)) % 1.0
        v = theta / math.pi
        col = np.minimum((u * self.w).astype(np.int64), self.w - 1)
        row = np.minimum((v * self.h).astype(np.int64), self.h - 1)
        return row, col, theta

    def radiance(self, d: np.ndarray) -> np.ndarray:
        if self.constant is not None:
            return np.broadcast_to(self.constant, (len(d), 3)).copy()
        row, col, _ = self._uv(d)
        return self.img[row, col]

    def pdf(self, d: np.ndarray) -> np.ndarray:
        if self.constant is not None:
            return np.full(len(d), 1.0 / (4 * math.pi))
        row, col, theta = self._uv(d)
        sin_t = np.sin(theta)
        p = self.weight[row, col] * self.w * self.h / (2 * math.pi ** 2 * np.maximum(sin_t, 1e-12))
        return np.where(sin_t > 0, p, 0.0)

    def sample(self, u1: np.ndarray, u2: np.ndarray):
        """Return (directions, solid-angle pdf, radiance)."""
        n = len(u1)
        if self.constant is not None:
            z = 1.0 - 2.0 * u1
            r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
            phi = 2 * math.pi * u2
            d = np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=1)
            return d, np.full(n, 1.0 / (4 * math.pi)), np.broadcast_to(self.constant, (n, 3)).copy()
        row = np.clip(np.searchsorted(self.row_cdf, u1, side="right") - 1, 0, self.h - 1)
        lo, hi = self.row_cdf[row], self.row_cdf[row + 1]
        fv = np.clip((u1 - lo) / np.maximum(hi - lo, 1e-300), 0.0, 1.0 - 1e-12)
        # rows offset by their index form one increasing table
        col = np.searchsorted(self.flat_cdf, u2 + row, side="right") - 1 - row * (self.w + 1)
        col = np.clip(col, 0, self.w - 1)
        lo = self.col_cdf[row, col]
        hi = self.col_cdf[row, col + 1]
        fu = np.clip((u2 - lo) / np.maximum(hi - lo, 1e-300), 0.0, 1.0 - 1e-12)
        u = (col + fu) / self.w
        v = (row + fv) / self.h
        theta = v * math.pi
        phi = 2 * math.pi * u - self.env.rotation
        st = np.sin(theta)
        d = np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=1)
        p = self.weight[row, col] * self.w * self.h / (2 * math.pi ** 2 * np.maximum(st, 1e-12))
        return d, p, self.img[row, col]
