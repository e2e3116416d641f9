"""Metamer verdicts and representational similarity on synthetic similarity curves.

Run:  python demos/03_metamer_verdicts.py
"""
import numpy as np

from metarender.analysis import build_rsm, classify_metamer, ecdf, rsa

rng = np.random.default_rng(0)

# %% Two runs that share a baseline: one climbs above it, one stalls below
epochs = np.arange(200)
baseline = 0.98 * (1 - np.exp(-epochs / 30))
good = 0.995 * (1 - np.exp(-epochs / 40))
poor = 0.90 * (1 - np.exp(-epochs / 40))


def views(curve):
    return curve[:, None] + rng.normal(0, 0.002, (len(curve), 5))


for name, run in (("good", good), ("poor", poor)):
    v = classify_metamer(views(run), views(baseline))
    print(f"{name}: top {v.top_sim:.3f} at epoch {v.epoch_of_top}, baseline {v.top_base:.3f}, "
          f"difference {v.rounded_difference:+.3f}, metamer {v.is_metamer}")

# %% RSA: latents of the same views through a rotated code space keep the similarity structure
z = rng.normal(size=(25, 64))
Q, _ = np.linalg.qr(rng.normal(size=(64, 64)))
print("rotated code:", rsa(build_rsm(z @ Q), build_rsm(z)))
print("unrelated code:", rsa(build_rsm(rng.normal(size=(25, 64))), build_rsm(z)))

# %% ECDF step function of a handful of samples
e = ecdf(rng.uniform(0.9, 1.0, 6))
print(np.c_[e.values, e.probs])
