"""Optimization loop: Adam over scene parameters, clipping, remeshing, early stopping and run logs."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from .diff import (BoundaryConfig, FeatureDistance, GradientSet, LossKind, MAE, ParameterSet, VertexPositions,
                   render_with_grad)
from .geometry import LaplacianSystem, build_laplacian, from_differential, midpoint_tessellate, to_differential
from .render.image import HDRImage, DisplayImage, tonemap, write_png
from .render.integrator import RenderSettings
from .scene import SceneDescription, write_obj

log = logging.getLogger(__name__)

OPEN_BOUND_EPS = 1e-4


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    uniform: bool = False     # share the largest second moment across each entry

    @staticmethod
    def fresh(values: dict, lr: float, uniform: bool = False) -> "AdamState":
        return AdamState({k: np.zeros_like(np.asarray(v, float)) for k, v in values.items()},
                         {k: np.zeros_like(np.asarray(v, float)) for k, v in values.items()}, 0, lr,
                         uniform=uniform)


def _values(p):
    return p.values() if isinstance(p, ParameterSet) else dict(p)


def adam_step(state: AdamState, grads, params):
    """One bias-corrected Adam update; ``params`` is a ParameterSet or a name -> array dict.

    With ``state.uniform`` every component of an entry is divided by the entry's
    largest second-moment estimate, so the step keeps the direction of the
    (smoothed) first moment instead of equalising per-coordinate magnitudes.
    """
    vals = _values(params)
    if set(vals) != set(grads) or set(vals) != set(state.m):
        raise ValueError(f"parameter/gradient names differ: {sorted(vals)} vs {sorted(grads)}")
    t = state.step + 1
    m, v, new = {}, {}, {}
    for k, x in vals.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(x) or g.shape != state.m[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} differs from parameter shape {np.shape(x)}")
        m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        mh = m[k] / (1 - state.beta1 ** t)
        vh = v[k] / (1 - state.beta2 ** t)
        if state.uniform and vh.size:
            vh = np.full_like(vh, vh.max())
        new[k] = x - state.lr * mh / (np.sqrt(vh) + state.eps)
    out_state = dataclasses.replace(state, m=m, v=v, step=t)
    out = params.with_values(new) if isinstance(params, ParameterSet) else new
    return out_state, out


# ---------------------------------------------------------------------------
# Clipping


ClipSpec = dict  # entry name -> (lo, hi, lower_open)


def default_clip_spec(params: ParameterSet) -> ClipSpec:
    return {n: (e.bounds[0], e.bounds[1], e.lower_open) for n, e in params if e.bounds is not None}


def clip_params(params: ParameterSet, spec: ClipSpec | None = None) -> ParameterSet:
    """Project bounded entries onto their intervals; an open lower bound lo maps to lo + 1e-4."""
    spec = default_clip_spec(params) if spec is None else spec
    out = {}
    for name, (lo, hi, lower_open) in spec.items():
        low = lo + OPEN_BOUND_EPS if lower_open else lo
        v = params[name].value
        out[name] = np.where(v < low if lower_open else v < lo, low, np.minimum(v, hi))
    return params.with_values(out)


# ---------------------------------------------------------------------------
# Early stopping


class EarlyStopper:
    """Stops once ``patience`` consecutive epochs bring no strict improvement of the best loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


def early_stop_epoch(losses, patience: int) -> int | None:
    """Epoch at which the loop stops for a given per-epoch loss sequence, or None."""
    stopper = EarlyStopper(patience)
    for e, l in enumerate(losses):
        if stopper.update(e, l):
            return e
    return None


# ---------------------------------------------------------------------------
# Run configuration and log


@dataclass
class RunConfig:
    epochs: int
    views: list | None = None          # camera indices; None = all
    loss: LossKind = MAE()
    lr: float = 3e-2
    lam: float = 15.0
    remesh_epochs: tuple = ()
    lr_decay: float = 8e-3
    patience: int = 50
    seed: int = 0
    clip: ClipSpec | None = None
    settings: RenderSettings = field(default_factory=lambda: RenderSettings(spp=16, max_depth=3))
    boundary: BoundaryConfig = BoundaryConfig()
    log_extractors: tuple = feat.REGISTRY
    snapshot_every: int = 0            # also store images every n epochs (0: remesh/best/final only)
    uniform_moments: bool = False      # Adam variant for vertex runs, see adam_step

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        r = list(self.remesh_epochs)
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("remesh epochs must be strictly increasing")
        if any(e >= self.epochs or e < 0 for e in r) and self.epochs > 0:
            raise ValueError("remesh epochs must lie in [0, epochs)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if isinstance(self.loss, FeatureDistance) and self.loss.extractor_id not in feat.REGISTRY:
            raise ValueError(f"unknown extractor {self.loss.extractor_id!r}")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {"kind": type(v).__name__, **dataclasses.asdict(v)}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


@dataclass
class RunLog:
    extractors: tuple
    records: list = field(default_factory=list)       # per (epoch, view)
    epochs: list = field(default_factory=list)        # per epoch summary
    snapshots: dict = field(default_factory=dict)     # epoch -> list of file names
    best_epoch: int = -1
    stopped_early: bool = False
    latents: dict = field(default_factory=dict)       # extractor -> {"target": (V, d), "best": (V, d)}
    best_params: object = None                        # ParameterSet at best_epoch

    def columns(self):
        return ["epoch", "view", "loss", "sim_mean"] + [f"sim_{e}" for e in self.extractors] + ["lr"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for r in self.records:
                w.writerow([r["epoch"], r["view"], repr(r["loss"]), repr(r["sim_mean"])]
                           + [repr(r[f"sim_{e}"]) for e in self.extractors] + [repr(r["lr"])])

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "view", "seconds"])
            for r in self.records:
                w.writerow([r["epoch"], r["view"], f"{r['seconds']:.6f}"])

    def epoch_losses(self) -> np.ndarray:
        return np.array([e["loss"] for e in self.epochs])

    def similarity_series(self, extractor: str) -> list[list[float]]:
        """Per-epoch lists of per-view similarities."""
        out: dict = {}
        for r in self.records:
            out.setdefault(r["epoch"], []).append(r[f"sim_{extractor}"])
        return [out[k] for k in sorted(out)]


def read_log_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = list(rows[0].keys()) if rows else []
    return cols, [{k: (int(v) if k in ("epoch", "view") else float(v)) for k, v in r.items()} for r in rows]


def series_from_rows(rows: list[dict], column: str) -> list[list[float]]:
    out: dict = {}
    for r in rows:
        out.setdefault(r["epoch"], []).append(r[column])
    return [out[k] for k in sorted(out)]


# ---------------------------------------------------------------------------
# Optimization


def render_seed(seed: int, epoch: int, view: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, view]).generate_state(1, np.uint64)[0])


class _ShapeVars:
    """Vertex entries optimized through differential coordinates u = A x."""

    def __init__(self, lam: float):
        self.lam = lam
        self.systems: dict[str, LaplacianSystem] = {}

    def rebuild(self, scene: SceneDescription, params: ParameterSet) -> dict:
        u = {}
        for name, e in params:
            if isinstance(e, VertexPositions):
                mesh = scene.mesh(e.mesh_id).mesh.with_vertices(e.as_points())
                self.systems[name] = build_laplacian(mesh, self.lam)
                u[name] = to_differential(e.value, self.systems[name])
        return u


def _targets_display(targets):
    out = []
    for t in targets:
        if isinstance(t, HDRImage):
            out.append(tonemap(t))
        elif isinstance(t, DisplayImage):
            out.append(t)
        else:
            out.append(None)
    return out


def optimize(scene: SceneDescription, init_params: ParameterSet, targets: list, config: RunConfig,
             run_dir=None, on_epoch=None) -> tuple[ParameterSet, RunLog]:
    """Per epoch and per view: transform, render, loss, backward, step.

    ``targets`` holds one entry per view: an HDRImage ground truth (or a latent
    vector when only the feature loss of that latent is needed). ``on_epoch``
    is called as ``on_epoch(epoch, scene, params, summary)`` after each epoch.
    """
    views = list(range(len(scene.cameras))) if config.views is None else list(config.views)
    if len(targets) != len(views):
        raise ValueError(f"{len(targets)} targets for {len(views)} views")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        for sub in ("images", "meshes"):
            (run_dir / sub).mkdir(parents=True, exist_ok=True)
    disp = _targets_display(targets)
    extractors = tuple(e for e in config.log_extractors) if all(d is not None for d in disp) else ()
    runlog = RunLog(extractors)
    params = init_params.copy()
    if config.epochs == 0:
        return params, runlog

    loss = config.loss
    if isinstance(loss, FeatureDistance):
        loss_targets = [feat.target_data(loss.extractor_id, d) if d is not None else np.asarray(t)
                        for d, t in zip(disp, targets)]
    else:
        loss_targets = targets
    sim_targets = {e: [feat.target_data(e, d) for d in disp] for e in extractors}
    latent_ext = [e for e in extractors if feat.get_extractor(e).produces_latent]
    for e in latent_ext:
        runlog.latents[e] = {"target": np.stack([t.numpy() for t in sim_targets[e]])}

    shape = any(isinstance(e, VertexPositions) for _, e in params)
    clip_spec = config.clip if config.clip is not None else default_clip_spec(params)
    sv = _ShapeVars(config.lam)
    u = sv.rebuild(scene, params)
    opt_vars = {n: (u[n] if n in u else e.value.copy()) for n, e in params}
    state = AdamState.fresh(opt_vars, config.lr, config.uniform_moments)
    stopper = EarlyStopper(config.patience)
    best_params, best_scene, best_images = params.copy(), scene, []
    best_sim = -np.inf

    def snapshot(epoch: int, view: int, image: HDRImage):
        if run_dir is None:
            return
        name = f"images/epoch_{epoch}_view_{view}.png"
        write_png(run_dir / name, tonemap(image))
        runlog.snapshots.setdefault(epoch, []).append(name)

    def mesh_snapshot(epoch: int, sc=None, p=None):
        if run_dir is None or not shape:
            return
        sc, p = (scene, params) if sc is None else (sc, p)
        cur = p.apply(sc)
        for n, e in p:
            if isinstance(e, VertexPositions):
                name = f"meshes/epoch_{epoch}.obj" if len(sv.systems) == 1 else f"meshes/epoch_{epoch}_{e.mesh_id}.obj"
                write_obj(run_dir / name, cur.mesh(e.mesh_id).mesh)
                runlog.snapshots.setdefault(epoch, []).append(name)

    try:
        for epoch in range(config.epochs):
            ep_losses, ep_images, ep_latents = [], [], {e: [] for e in latent_ext}
            for vi, view in enumerate(views):
                if vi == 0 and epoch in config.remesh_epochs and shape:
                    scene, params = _remesh(scene, params)
                    u = sv.rebuild(scene, params)
                    opt_vars = {n: (u[n] if n in u else e.value.copy()) for n, e in params}
                    state = AdamState.fresh(opt_vars, state.lr * config.lr_decay, config.uniform_moments)
                    mesh_snapshot(epoch)
                t0 = time.perf_counter()
                settings = dataclasses.replace(config.settings, seed=render_seed(config.seed, epoch, view))
                res = render_with_grad(scene, params, scene.cameras[view], settings, loss, loss_targets[vi],
                                       config.boundary)
                grads = {n: (from_differential(g, sv.systems[n]) if n in sv.systems else g)
                         for n, g in res.grads.items()}
                state, opt_vars = adam_step(state, grads, opt_vars)
                new_vals = {n: (from_differential(v, sv.systems[n]) if n in sv.systems else v)
                            for n, v in opt_vars.items()}
                params = params.with_values(new_vals)
                if clip_spec:
                    params = clip_params(params, clip_spec)
                    opt_vars = {n: (opt_vars[n] if n in sv.systems else params[n].value.copy()) for n in opt_vars}
                shown = tonemap(res.image)
                rec = {"epoch": epoch, "view": view, "loss": res.loss, "lr": state.lr}
                sims = []
                for e in extractors:
                    s = feat.similarity(e, shown.data, sim_targets[e][vi])
                    rec[f"sim_{e}"] = s
                    sims.append(s)
                    if e in ep_latents:
                        ep_latents[e].append(feat.extract(e, shown.data))
                rec["sim_mean"] = float(np.mean(sims)) if sims else float("nan")
                rec["seconds"] = time.perf_counter() - t0
                runlog.records.append(rec)
                ep_losses.append(res.loss)
                ep_images.append((view, res.image))
            mean_loss = float(np.mean(ep_losses))
            summary = {"epoch": epoch, "loss": mean_loss, "lr": state.lr}
            for e in extractors:
                summary[f"sim_{e}"] = float(np.mean([r[f"sim_{e}"] for r in runlog.records[-len(views):]]))
            runlog.epochs.append(summary)
            stop = stopper.update(epoch, mean_loss)
            if stopper.best_epoch == epoch:
                best_params, best_scene, best_images = params.copy(), scene, ep_images
                runlog.best_epoch = epoch
            if latent_ext:
                key = latent_ext[0] if not isinstance(loss, FeatureDistance) or loss.extractor_id not in latent_ext \
                    else loss.extractor_id
                if summary[f"sim_{key}"] > best_sim:
                    best_sim = summary[f"sim_{key}"]
                    for e in latent_ext:
                        runlog.latents[e]["best"] = np.stack(ep_latents[e])
            keep = (epoch == 0 or epoch in config.remesh_epochs or stop or epoch == config.epochs - 1
                    or (config.snapshot_every and epoch % config.snapshot_every == 0))
            if keep:
                for view, img in ep_images:
                    snapshot(epoch, view, img)
            if on_epoch is not None:
                on_epoch(epoch, scene, params, summary)
            log.info("epoch %d loss %.6g lr %.3g", epoch, mean_loss, state.lr)
            if stop:
                runlog.stopped_early = True
                break
        last = runlog.epochs[-1]["epoch"]
        mesh_snapshot(last)
        if runlog.best_epoch not in runlog.snapshots:
            for view, img in best_images:
                snapshot(runlog.best_epoch, view, img)
        if runlog.best_epoch != last:
            mesh_snapshot(runlog.best_epoch, best_scene, best_params)
        runlog.best_params = best_params
    finally:
        if run_dir is not None:
            save_run(run_dir, runlog)
    return params, runlog


def _remesh(scene: SceneDescription, params: ParameterSet):
    vals = {}
    for name, e in params:
        if isinstance(e, VertexPositions):
            mesh = midpoint_tessellate(scene.mesh(e.mesh_id).mesh.with_vertices(e.as_points()))
            scene = scene.with_mesh(e.mesh_id, mesh)
            vals[name] = mesh.vertices.ravel()
    out = ParameterSet()
    for name, e in params:
        if name in vals:
            out.add(name, VertexPositions(e.mesh_id, vals[name]))
        else:
            out.add(name, dataclasses.replace(e, value=e.value.copy()))
    return scene, out


def save_run(run_dir, runlog: RunLog) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    runlog.write_csv(run_dir / "log.csv")
    runlog.write_timing(run_dir / "timing.csv")
    for e, d in runlog.latents.items():
        if "best" in d:
            np.savez(run_dir / f"latents_{e}.npz", **d)
    with open(run_dir / "epochs.json", "w") as fh:
        json.dump({"best_epoch": runlog.best_epoch, "stopped_early": runlog.stopped_early,
                   "epochs": runlog.epochs, "snapshots": {str(k): v for k, v in runlog.snapshots.items()}},
                  fh, indent=1)
