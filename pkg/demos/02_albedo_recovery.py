"""Recover a sphere's albedo from four rendered views with Adam on the MAE loss.

Run:  python demos/02_albedo_recovery.py   (well under a minute on one core)
"""
from pathlib import Path

import numpy as np

from metarender.optim import optimize
from metarender.pipeline import build_problem, load_run_spec
from metarender.scene import load_scene

configs = Path(__file__).resolve().parents[1] / "configs"
truth = load_scene((configs / "sphere_albedo.yaml").read_text(), configs)
spec = load_run_spec((configs / "albedo_run.yaml").read_text())

# shorter than the full run; the estimate settles within ~20 epochs
spec = spec.with_overrides(epochs=60)
problem = build_problem(truth, spec, seed=0)


def show(epoch, scene, params, summary):
    if epoch % 10 == 0:
        print(epoch, np.round(params["m.base_color"].value, 3), f"loss {summary['loss']:.4f}")


params, log = optimize(problem.init_scene, problem.init_params, problem.targets, problem.config, on_epoch=show)
print("final albedo", np.round(params["m.base_color"].value, 4), "target", [0.2, 0.5, 0.8])
