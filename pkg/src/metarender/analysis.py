"""Similarity measures, representational similarity analysis, metamer verdicts and ECDFs."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .features import SPHERE_EPS, normalize_to_sphere

ALPHA = 0.05


def hypersphere_similarity(z_render, z_target, eps: float = SPHERE_EPS) -> float:
    a = np.asarray(z_render, dtype=np.float64)
    b = np.asarray(z_target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"latent dimensions differ: {a.shape} vs {b.shape}")
    return float(normalize_to_sphere(a, eps) @ normalize_to_sphere(b, eps))


def build_rsm(latents, eps: float = SPHERE_EPS) -> np.ndarray:
    """Pairwise hypersphere similarities; each unordered pair is computed once and mirrored."""
    Z = [np.asarray(z, dtype=np.float64) for z in latents]
    if len(Z) < 2:
        raise ValueError("need at least two latents")
    if any(z.shape != Z[0].shape for z in Z):
        raise ValueError("latent dimensions differ")
    U = np.stack([normalize_to_sphere(z, eps) for z in Z])
    n = len(U)
    S = np.empty((n, n))
    for i in range(n):
        S[i, i] = U[i] @ U[i]
        for j in range(i + 1, n):
            S[i, j] = S[j, i] = U[i] @ U[j]
    return S


def upper_triangle(S: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(len(S), k=1)
    return S[i, j]


@dataclass(frozen=True)
class RSAResult:
    tau: float
    p_value: float
    significant: bool


def is_significant(p: float, alpha: float = ALPHA) -> bool:
    return bool(p < alpha)


def _tie_sums(x: np.ndarray):
    _, cnt = np.unique(x, return_counts=True)
    cnt = cnt[cnt > 1].astype(np.float64)
    return ((cnt * (cnt - 1) / 2).sum(), (cnt * (cnt - 1) * (cnt - 2)).sum(),
            (cnt * (cnt - 1) * (2 * cnt + 5)).sum())


def kendall_tau_b(x, y) -> tuple[float, float]:
    """Tau-b and the two-sided p-value of its tie-adjusted normal approximation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least three pairs")
    i, j = np.triu_indices(n, k=1)
    s = np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
    s_sum = float(s.sum())          # concordant minus discordant
    xtie, x0, x1 = _tie_sums(x)
    ytie, y0, y1 = _tie_sums(y)
    tot = n * (n - 1) / 2
    if tot == xtie or tot == ytie:
        raise ValueError("tau-b is undefined for a constant input")
    tau = s_sum / np.sqrt((tot - xtie) * (tot - ytie))
    m = n * (n - 1.0)
    var = (m * (2 * n + 5) - x1 - y1) / 18 + 2 * xtie * ytie / m + x0 * y0 / (9 * m * (n - 2))
    z = s_sum / np.sqrt(var)
    return float(np.clip(tau, -1.0, 1.0)), float(min(1.0, erfc(abs(z) / np.sqrt(2))))


def rsa(rsm_a: np.ndarray, rsm_b: np.ndarray) -> RSAResult:
    a, b = np.asarray(rsm_a), np.asarray(rsm_b)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"RSM shapes differ or are not square: {a.shape} vs {b.shape}")
    if len(a) < 3:
        raise ValueError("RSA needs at least 3 views")
    tau, p = kendall_tau_b(upper_triangle(a), upper_triangle(b))
    return RSAResult(tau, p, is_significant(p))


# ---------------------------------------------------------------------------
# Metamer verdicts


@dataclass(frozen=True)
class MetamerVerdict:
    top_sim: float
    top_base: float
    similarity_difference: float
    epoch_of_top: int
    is_metamer: bool

    @property
    def rounded_difference(self) -> float:
        return round(self.similarity_difference, 3)


def top_similarity(series) -> tuple[float, int]:
    """Max over epochs of the mean over views; ``series`` is per-epoch values or per-epoch lists."""
    if len(series) == 0:
        raise ValueError("empty similarity series")
    means = np.array([np.mean(s) for s in series], dtype=np.float64)
    k = int(np.argmax(means))
    return float(means[k]), k


def classify_metamer(run_series, baseline_series) -> MetamerVerdict:
    top_sim, epoch = top_similarity(run_series)
    top_base, _ = top_similarity(baseline_series)
    diff = top_sim - top_base
    return MetamerVerdict(top_sim, top_base, diff, epoch, bool(diff >= 0))


def write_verdicts(path, rows: list[dict]) -> None:
    cols = ["Name", "Epoch", "Top Sim", "Top Base", "RSA", "Significant", "Similarity Difference", "Metamer"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})


def verdict_row(name: str, v: MetamerVerdict, rsa_result: RSAResult | None = None) -> dict:
    return {"Name": name, "Epoch": v.epoch_of_top, "Top Sim": f"{v.top_sim:.3f}", "Top Base": f"{v.top_base:.3f}",
            "RSA": "" if rsa_result is None else f"{rsa_result.tau:.3f}",
            "Significant": "" if rsa_result is None else ("yes" if rsa_result.significant else "no"),
            "Similarity Difference": f"{v.similarity_difference:.3f}", "Metamer": "yes" if v.is_metamer else "no"}


# ---------------------------------------------------------------------------
# ECDF


@dataclass(frozen=True)
class ECDF:
    values: np.ndarray
    probs: np.ndarray

    def __call__(self, x):
        return np.searchsorted(self.values, x, side="right") / len(self.values)

    def write_csv(self, path, label: str = "") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "value", "cumulative"])
            for v, p in zip(self.values, self.probs):
                w.writerow([label, repr(float(v)), repr(float(p))])


def ecdf(samples) -> ECDF:
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("ECDF of an empty sample")
    return ECDF(x, np.arange(1, x.size + 1) / x.size)
