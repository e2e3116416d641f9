"""Command-line entry point: render, baseline, reconstruct, analyze, ecdf."""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import features as feat
from .analysis import (build_rsm, classify_metamer, ecdf, rsa, top_similarity, verdict_row, write_verdicts)
from .optim import read_log_csv, series_from_rows
from .pipeline import (RunSpecError, build_problem, load_run_spec, null_similarities, run_problem, top_from_log)
from .render import configure_threads
from .render.image import tonemap, write_pfm, write_png
from .render.integrator import RenderSettings, render
from .scene import SceneError, load_scene, serialize_scene

TOOL_VERSION = "0.1.0"
MANIFEST = "manifest.json"
MIN_NULL = 10
MIN_SEEDS = 3
RUN_COLOR = "#1f77b4"
BASELINE_COLOR = "#ff7f0e"

log = logging.getLogger("metarender")


class ManifestError(RuntimeError):
    pass


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Manifests


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scene_hash(scene) -> str:
    return hashlib.sha256(serialize_scene(scene).encode()).hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, info: dict, outputs: list[str]) -> dict:
    doc = dict(info)
    doc["tool_version"] = TOOL_VERSION
    doc["finished"] = _now()
    doc["outputs"] = {rel: sha256_file(out_dir / rel) for rel in sorted(outputs)}
    (out_dir / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def load_manifest(out_dir) -> dict:
    """Read a manifest and check every recorded output hash."""
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST
    if not path.exists():
        raise ManifestError(f"{out_dir}: no {MANIFEST}")
    doc = json.loads(path.read_text())
    for rel, digest in doc.get("outputs", {}).items():
        f = out_dir / rel
        if not f.exists():
            raise ManifestError(f"{out_dir}: output {rel} is missing")
        if sha256_file(f) != digest:
            raise ManifestError(f"{out_dir}: output {rel} does not match its recorded hash")
    if "weights" in doc and doc["weights"] != feat.weights_hash():
        raise ManifestError(f"{out_dir}: extractor weights changed since the run")
    return doc


def _files_under(root: Path, exclude=()) -> list[str]:
    out = []
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel != MANIFEST and not any(rel.startswith(e) for e in exclude):
            out.append(rel)
    return out


# ---------------------------------------------------------------------------
# Plots


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "metarender"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_similarity(path, run_series, base_series, label: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for series, color, name in ((run_series, RUN_COLOR, "run"), (base_series, BASELINE_COLOR, "baseline")):
        mean = np.array([np.mean(s) for s in series])
        std = np.array([np.std(s) for s in series])
        ep = np.arange(len(mean))
        ax.plot(ep, mean, color=color, label=name)
        ax.fill_between(ep, mean - std, mean + std, color=color, alpha=0.25, linewidth=0)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"similarity ({label})")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_ecdfs(path, curves: dict) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    colors = {"null": "#7f7f7f", "seeds": RUN_COLOR, "baseline": BASELINE_COLOR}
    for name, e in curves.items():
        x = np.concatenate([[e.values[0]], e.values])
        y = np.concatenate([[0.0], e.probs])
        ax.step(x, y, where="post", color=colors.get(name), label=name)
    ax.set_xlabel("similarity")
    ax.set_ylabel("cumulative probability")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Commands


def _read_scene(path):
    path = Path(path)
    if not path.exists():
        raise CommandError(f"scene file not found: {path}")
    return load_scene(path.read_text(), path.parent)


def _read_spec(path, **overrides):
    path = Path(path)
    if not path.exists():
        raise CommandError(f"config file not found: {path}")
    return load_run_spec(path.read_text()).with_overrides(**overrides)


def _parse_views(text):
    if text is None or text == "all":
        return None
    if text.isdigit():
        return list(range(int(text)))
    return [int(v) for v in text.split(",") if v]


def cmd_render(scene_path, out, camera="all", spp=64, seed=0, max_depth=8) -> dict:
    scene = _read_scene(scene_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    idx = range(len(scene.cameras)) if camera == "all" else [int(camera)]
    settings = RenderSettings(spp=spp, max_depth=max_depth, seed=seed)
    outputs = []
    for i in idx:
        if not 0 <= i < len(scene.cameras):
            raise CommandError(f"camera index {i} out of range (scene has {len(scene.cameras)})")
        img = render(scene, scene.cameras[i], settings)
        write_pfm(out / f"view_{i}.pfm", img)
        write_png(out / f"view_{i}.png", tonemap(img))
        outputs += [f"view_{i}.pfm", f"view_{i}.png"]
    return write_manifest(out, {"command": "render", "config": str(scene_path), "seed": seed, "spp": spp,
                                "scene": scene_hash(scene), "started": started}, outputs)


def _run(kind, scene_path, config_path, out, seed, extractor=None, views=None, spp=None, epochs=None) -> dict:
    scene = _read_scene(scene_path)
    spec = _read_spec(config_path, views=views, spp=spp, epochs=epochs)
    if extractor is not None and extractor not in feat.REGISTRY:
        raise CommandError(f"unknown extractor {extractor!r}; registered: {', '.join(feat.REGISTRY)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    problem = build_problem(scene, spec, seed, extractor)
    run_problem(problem, out)
    info = {"command": kind, "config": str(config_path), "scene_config": str(scene_path), "seed": seed,
            "extractor": extractor, "scene": scene_hash(scene), "weights": feat.weights_hash(),
            "config_hash": sha256_file(config_path), "run_config": problem.config.to_dict(), "started": started}
    return write_manifest(out, info, _files_under(out))


def cmd_baseline(scene_path, config_path, out, seed=0, **kw) -> dict:
    return _run("baseline", scene_path, config_path, out, seed, None, **kw)


def cmd_reconstruct(scene_path, config_path, out, extractor, seed=0, **kw) -> dict:
    return _run("reconstruct", scene_path, config_path, out, seed, extractor, **kw)


def cmd_analyze(run_dir, baseline_dir, out=None, extractor=None) -> dict:
    run_dir, baseline_dir = Path(run_dir), Path(baseline_dir)
    for name, d in (("run", run_dir), ("baseline", baseline_dir)):
        if not d.is_dir():
            raise CommandError(f"{name} directory not found: {d}")
    run_m = load_manifest(run_dir)
    load_manifest(baseline_dir)
    extractor = extractor or run_m.get("extractor") or "tinyconv"
    col = f"sim_{extractor}"
    _, run_rows = read_log_csv(run_dir / "log.csv")
    _, base_rows = read_log_csv(baseline_dir / "log.csv")
    if not run_rows or col not in run_rows[0]:
        raise CommandError(f"run log has no column {col}")
    if not base_rows or col not in base_rows[0]:
        raise CommandError(f"baseline log has no column {col}")
    run_series = series_from_rows(run_rows, col)
    base_series = series_from_rows(base_rows, col)
    verdict = classify_metamer(run_series, base_series)
    rsa_result = None
    lat = run_dir / f"latents_{extractor}.npz"
    if lat.exists():
        d = np.load(lat)
        if len(d["target"]) >= 3:
            rsa_result = rsa(build_rsm(d["best"]), build_rsm(d["target"]))
    out = Path(out) if out is not None else run_dir / "analysis"
    (out / "plots").mkdir(parents=True, exist_ok=True)
    started = _now()
    write_verdicts(out / "verdict.csv", [verdict_row(run_dir.name, verdict, rsa_result)])
    plot_similarity(out / "plots" / "similarity.svg", run_series, base_series, extractor)
    return write_manifest(out, {"command": "analyze", "run": str(run_dir), "baseline": str(baseline_dir),
                                "extractor": extractor, "started": started,
                                "verdict": verdict_row(run_dir.name, verdict, rsa_result)},
                          ["verdict.csv", "plots/similarity.svg"])


def ecdf_samples(scene, spec, extractor: str, n_null: int, n_seeds: int, seed: int, out: Path | None = None):
    """Similarity samples for the three controls: random shapes, seeded reconstructions, ground-truth run."""
    problem = build_problem(scene, spec, seed, extractor)
    null = null_similarities(problem, extractor, n_null, seed)
    seeds = []
    for k in range(n_seeds):
        p = build_problem(scene, spec, seed + 1 + k, extractor)
        _, rl = run_problem(p, None if out is None else out / f"seed_{k}")
        seeds.append(top_from_log(rl, extractor))
    gt_spec = spec.with_overrides(epochs=spec.gt_epochs, remesh_epochs=())
    gt = build_problem(scene, gt_spec, seed + 1000, extractor, start_at_truth=True)
    _, rl = run_problem(gt, None if out is None else out / "ground_truth")
    baseline = [float(np.mean(s)) for s in rl.similarity_series(extractor)]
    return null, seeds, baseline


def cmd_ecdf(scene_path, config_path, out, extractor, n_null, n_seeds, seed=0, **kw) -> dict:
    if n_null < MIN_NULL:
        raise ValueError(f"n_null must be at least {MIN_NULL}")
    if n_seeds < MIN_SEEDS:
        raise ValueError(f"n_seeds must be at least {MIN_SEEDS}")
    if extractor not in feat.REGISTRY:
        raise CommandError(f"unknown extractor {extractor!r}")
    scene = _read_scene(scene_path)
    spec = _read_spec(config_path, **kw)
    out = Path(out)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    started = _now()
    null, seeds, baseline = ecdf_samples(scene, spec, extractor, n_null, n_seeds, seed, out)
    curves = {"null": ecdf(null), "seeds": ecdf(seeds), "baseline": ecdf(baseline)}
    outputs = []
    for name, e in curves.items():
        e.write_csv(out / f"ecdf_{name}.csv", name)
        outputs.append(f"ecdf_{name}.csv")
    plot_ecdfs(out / "plots" / "ecdf.svg", curves)
    outputs.append("plots/ecdf.svg")
    summary = {"max_null": max(null), "min_seeds": min(seeds), "median_seeds": float(np.median(seeds)),
               "median_baseline": float(np.median(baseline))}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    outputs.append("summary.json")
    info = {"command": "ecdf", "config": str(config_path), "scene_config": str(scene_path), "seed": seed,
            "extractor": extractor, "n_null": n_null, "n_seeds": n_seeds, "scene": scene_hash(scene),
            "weights": feat.weights_hash(), "started": started, "summary": summary}
    return write_manifest(out, info, outputs)


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metarender", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render every (or one) camera of a scene to PFM and PNG")
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", default="all")
    r.add_argument("--spp", type=int, default=64)
    r.add_argument("--max-depth", type=int, default=8)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)

    for name, helptext in (("baseline", "optimize with a pixel loss"),
                           ("reconstruct", "optimize with a feature-space loss")):
        b = sub.add_parser(name, help=helptext)
        b.add_argument("--scene", required=True, help="ground-truth scene")
        b.add_argument("--config", required=True, help="run configuration")
        b.add_argument("--seed", type=int, default=0)
        b.add_argument("--out", required=True)
        b.add_argument("--views", default=None, help="'all', a count, or a comma-separated index list")
        b.add_argument("--spp", type=int, default=None)
        b.add_argument("--epochs", type=int, default=None)
        b.add_argument("--extractor", required=name == "reconstruct", choices=feat.REGISTRY,
                       default=None)

    a = sub.add_parser("analyze", help="metamer verdict and similarity plot for a run against its baseline")
    a.add_argument("--run", required=True)
    a.add_argument("--baseline", required=True)
    a.add_argument("--extractor", choices=feat.REGISTRY, default=None)
    a.add_argument("--out", default=None)

    e = sub.add_parser("ecdf", help="null / seeds / ground-truth similarity distributions")
    e.add_argument("--scene", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--extractor", required=True, choices=feat.REGISTRY)
    e.add_argument("--n-null", type=int, default=10)
    e.add_argument("--n-seeds", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--views", default=None)
    e.add_argument("--spp", type=int, default=None)
    e.add_argument("--epochs", type=int, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    configure_threads()
    try:
        if args.command == "render":
            cmd_render(args.scene, args.out, args.camera, args.spp, args.seed, args.max_depth)
        elif args.command in ("baseline", "reconstruct"):
            kw = dict(views=_parse_views(args.views), spp=args.spp, epochs=args.epochs)
            if args.command == "baseline":
                cmd_baseline(args.scene, args.config, args.out, args.seed, **kw)
            else:
                cmd_reconstruct(args.scene, args.config, args.out, args.extractor, args.seed, **kw)
        elif args.command == "analyze":
            doc = cmd_analyze(args.run, args.baseline, args.out, args.extractor)
            v = doc["verdict"]
            print(f"top sim {v['Top Sim']}  top base {v['Top Base']}  difference {v['Similarity Difference']}  "
                  f"metamer {v['Metamer']}")
        elif args.command == "ecdf":
            if args.n_null < MIN_NULL or args.n_seeds < MIN_SEEDS:
                parser.error(f"--n-null must be at least {MIN_NULL} and --n-seeds at least {MIN_SEEDS}")
            doc = cmd_ecdf(args.scene, args.config, args.out, args.extractor, args.n_null, args.n_seeds,
                           args.seed, views=_parse_views(args.views), spp=args.spp, epochs=args.epochs)
            print(json.dumps(doc["summary"], sort_keys=True))
    except (SceneError, RunSpecError, CommandError, ManifestError, ValueError, OSError) as exc:
        print(f"metarender {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
