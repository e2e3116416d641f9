"""Run configurations and the experiment pipeline behind the command-line tool."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import features as feat
from .analysis import top_similarity
from .diff import BoundaryConfig, DualBuffer, FeatureDistance, MAE, ParameterSet, VertexPositions
from .geometry import build_laplacian
from .optim import RunConfig, optimize
from .render.image import HDRImage, tonemap
from .render.integrator import RenderSettings, render
from .scene import (Mesh, PrincipledLite, SceneDescription, SceneValidationError, make_icosphere,
                    _parse_geometry, _parse_albedo)

DEFAULT_TARGET_SEED = 4242


class RunSpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class RunSpec:
    kind: str                                   # "shape" or "material"
    mesh: str | None = None
    init_geometry: dict = field(default_factory=lambda: {"type": "icosphere", "subdivisions": 3})
    material: str | None = None
    fields: tuple = ("base_color",)
    init_values: dict = field(default_factory=dict)
    epochs: int = 200
    lr: float = 3e-2
    lam: float = 15.0
    remesh_epochs: tuple = ()
    patience: int = 50
    views: list | None = None
    spp: int = 16
    max_depth: int = 3
    target_spp: int = 256
    target_seed: int = DEFAULT_TARGET_SEED
    loss: str = "mae"                           # mae | dual_buffer
    squared: bool = True
    space: str = "display"
    extractors: tuple = feat.REGISTRY
    primary_samples: float = 1.0
    secondary_samples: float = 0.25
    snapshot_every: int = 0
    gt_epochs: int = 10
    uniform_moments: bool = False

    def with_overrides(self, **kw) -> "RunSpec":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


_KEYS = {f.name for f in dataclasses.fields(RunSpec)} | {"lambda", "settings", "target", "boundary"}


def load_run_spec(text: str) -> RunSpec:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise RunSpecError("config", f"does not parse: {exc}") from None
    if not isinstance(doc, dict):
        raise RunSpecError("config", "expected a mapping")
    unknown = set(doc) - _KEYS
    if unknown:
        raise RunSpecError(sorted(unknown)[0], "unknown field")
    kw = {k: v for k, v in doc.items() if k in {f.name for f in dataclasses.fields(RunSpec)}}
    if "lambda" in doc:
        kw["lam"] = float(doc["lambda"])
    for sub, mapping in (("settings", {"spp": "spp", "max_depth": "max_depth"}),
                         ("target", {"spp": "target_spp", "seed": "target_seed"}),
                         ("boundary", {"primary_samples_per_pixel": "primary_samples",
                                       "secondary_samples_per_pixel": "secondary_samples"})):
        for k, v in (doc.get(sub) or {}).items():
            if k not in mapping:
                raise RunSpecError(f"{sub}.{k}", "unknown field")
            kw[mapping[k]] = v
    for k in ("fields", "remesh_epochs", "extractors"):
        if k in kw:
            kw[k] = tuple(kw[k])
    spec = RunSpec(**kw)
    validate_run_spec(spec)
    return spec


def validate_run_spec(spec: RunSpec) -> None:
    if spec.kind not in ("shape", "material"):
        raise RunSpecError("kind", f"expected shape or material, got {spec.kind!r}")
    if spec.kind == "shape" and not spec.mesh:
        raise RunSpecError("mesh", "shape runs name the mesh to optimize")
    if spec.kind == "material" and not spec.material:
        raise RunSpecError("material", "material runs name the material to optimize")
    if spec.loss not in ("mae", "dual_buffer"):
        raise RunSpecError("loss", f"expected mae or dual_buffer, got {spec.loss!r}")
    for e in spec.extractors:
        if e not in feat.REGISTRY:
            raise RunSpecError("extractors", f"unknown extractor {e!r}")
    if spec.epochs < 0:
        raise RunSpecError("epochs", "must be non-negative")


# ---------------------------------------------------------------------------
# Problem construction


@dataclass
class Problem:
    truth: SceneDescription
    init_scene: SceneDescription
    init_params: ParameterSet
    truth_params: ParameterSet | None
    targets: list
    config: RunConfig
    views: list


def pixel_loss(spec: RunSpec):
    return DualBuffer(spec.squared, spec.space) if spec.loss == "dual_buffer" else MAE(spec.space)


def render_targets(scene: SceneDescription, views, spp: int, max_depth: int, seed: int) -> list[HDRImage]:
    return [render(scene, scene.cameras[v], RenderSettings(spp=spp, max_depth=max_depth, seed=seed + v))
            for v in views]


def initial_scene(truth: SceneDescription, spec: RunSpec) -> SceneDescription:
    if spec.kind == "shape":
        try:
            mesh = _parse_geometry(spec.init_geometry, "init_geometry", ".")
        except SceneValidationError as exc:
            raise RunSpecError(exc.field, str(exc)) from None
        return truth.with_mesh(spec.mesh, mesh)
    mat = truth.materials.get(spec.material)
    if mat is None:
        raise RunSpecError("material", f"scene has no material {spec.material!r}")
    kw = {}
    for k, v in spec.init_values.items():
        if k in ("base_color", "albedo"):
            key = "base_color" if isinstance(mat, PrincipledLite) else "albedo"
            kw[key] = _parse_albedo(v, f"init_values.{k}", ".")
        else:
            kw[k] = float(v)
    return truth.with_material(spec.material, dataclasses.replace(mat, **kw))


def make_params(scene: SceneDescription, spec: RunSpec) -> ParameterSet:
    if spec.kind == "shape":
        return ParameterSet.vertices(spec.mesh, scene)
    return ParameterSet.bsdf(spec.material, scene, spec.fields)


def build_problem(truth: SceneDescription, spec: RunSpec, seed: int, extractor: str | None = None,
                  start_at_truth: bool = False) -> Problem:
    views = list(range(len(truth.cameras))) if spec.views is None else [int(v) for v in spec.views]
    if not truth.cameras:
        raise RunSpecError("views", "scene has no cameras")
    for v in views:
        if not 0 <= v < len(truth.cameras):
            raise RunSpecError("views", f"camera index {v} out of range")
    init = truth if start_at_truth else initial_scene(truth, spec)
    params = make_params(init, spec)
    targets = render_targets(truth, views, spec.target_spp, spec.max_depth, spec.target_seed)
    loss = FeatureDistance(extractor) if extractor else pixel_loss(spec)
    remesh = tuple(e for e in spec.remesh_epochs if e < spec.epochs)
    config = RunConfig(epochs=spec.epochs, views=views, loss=loss, lr=spec.lr, lam=spec.lam, remesh_epochs=remesh,
                       patience=spec.patience, seed=seed,
                       settings=RenderSettings(spp=spec.spp, max_depth=spec.max_depth),
                       boundary=BoundaryConfig(True, spec.primary_samples, spec.secondary_samples),
                       log_extractors=tuple(spec.extractors), snapshot_every=spec.snapshot_every,
                       uniform_moments=bool(spec.uniform_moments))
    return Problem(truth, init, params, make_params(truth, spec), targets, config, views)


def run_problem(problem: Problem, run_dir=None):
    return optimize(problem.init_scene, problem.init_params, problem.targets, problem.config, run_dir)


# ---------------------------------------------------------------------------
# Controls


def random_blob(seed: int, subdivisions: int = 3, amplitude: float = 0.3, smoothing: float = 20.0) -> Mesh:
    """Icosphere with smoothed random radial offsets and a random axis scaling."""
    rng = np.random.default_rng(seed)
    base = make_icosphere(subdivisions)
    sys = build_laplacian(base, smoothing)
    bump = sys.solve(rng.normal(size=base.n_vertices))
    bump = amplitude * (bump - bump.mean()) / max(bump.std(), 1e-12)
    scale = rng.uniform(0.6, 1.4, 3)
    return base.with_vertices(base.vertices * (1.0 + bump)[:, None] * scale)


def view_mean_similarity(scene: SceneDescription, targets, views, extractor: str, settings: RenderSettings,
                         seed: int) -> float:
    sims = []
    for k, v in enumerate(views):
        img = render(scene, scene.cameras[v], dataclasses.replace(settings, seed=seed + k))
        sims.append(feat.similarity(extractor, tonemap(img).data, feat.target_data(extractor, tonemap(targets[k]))))
    return float(np.mean(sims))


def null_similarities(problem: Problem, extractor: str, n_null: int, seed: int) -> list[float]:
    """Similarities between target views and renders of unrelated random shapes (shape runs)."""
    mesh_id = next((e.mesh_id for _, e in problem.init_params if isinstance(e, VertexPositions)), None)
    if mesh_id is None:
        raise RunSpecError("kind", "null distributions are defined for shape runs")
    out = []
    for k in range(n_null):
        scene = problem.truth.with_mesh(mesh_id, random_blob(seed * 1000 + k))
        out.append(view_mean_similarity(scene, problem.targets, problem.views, extractor,
                                        problem.config.settings, seed + 17 * k))
    return out


def top_from_log(runlog, extractor: str) -> float:
    return top_similarity(runlog.similarity_series(extractor))[0]
