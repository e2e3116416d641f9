import csv
import json
from pathlib import Path

import numpy as np
import pytest

from metarender import cli
from metarender.optim import RunLog, read_log_csv
from metarender.pipeline import RunSpecError, build_problem, load_run_spec, random_blob
from metarender.render.image import read_png, tonemap_array
from metarender.scene import load_scene

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY_SCENE = """
materials:
  m: {type: diffuse, albedo: [0.2, 0.5, 0.8]}
meshes:
  - id: obj
    geometry: {type: icosphere, subdivisions: 2, scale: [1.0, 0.8, 1.2]}
    material: m
environment: {type: latlong, preset: studio}
cameras:
  - fibonacci: {count: 3, radius: 3.5}
    fov: 40
    resolution: [8, 8]
"""

TINY_MATERIAL = """
kind: material
material: m
init_values: {base_color: [0.5, 0.5, 0.5]}
epochs: 2
lr: 0.03
settings: {spp: 2, max_depth: 2}
target: {spp: 8, seed: 1}
extractors: [pixel, tinyconv]
"""

TINY_SHAPE = """
kind: shape
mesh: obj
init_geometry: {type: icosphere, subdivisions: 1}
epochs: 2
lr: 0.05
lambda: 15
settings: {spp: 2, max_depth: 2}
target: {spp: 8, seed: 1}
extractors: [tinyconv]
gt_epochs: 2
"""


@pytest.fixture
def files(tmp_path):
    paths = {}
    for name, text in (("scene.yaml", TINY_SCENE), ("material.yaml", TINY_MATERIAL), ("shape.yaml", TINY_SHAPE)):
        p = tmp_path / name
        p.write_text(text)
        paths[name.split(".")[0]] = p
    return paths


class TestRunSpec:
    @pytest.mark.parametrize("name", ["albedo_run.yaml", "shape_run.yaml", "glass_run.yaml"])
    def test_shipped_configs_load(self, name):
        spec = load_run_spec((CONFIGS / name).read_text())
        assert spec.kind in ("material", "shape")

    @pytest.mark.parametrize("name", ["ellipsoid.yaml", "sphere_albedo.yaml", "glass_sphere.yaml"])
    def test_shipped_scenes_load(self, name):
        assert load_scene((CONFIGS / name).read_text(), CONFIGS).cameras

    def test_shape_config_values(self):
        spec = load_run_spec((CONFIGS / "shape_run.yaml").read_text())
        assert (spec.lr, spec.lam, spec.remesh_epochs, spec.patience) == (0.1, 15.0, (100, 200), 50)

    def test_glass_uses_dual_buffer(self):
        assert load_run_spec((CONFIGS / "glass_run.yaml").read_text()).loss == "dual_buffer"

    def test_unknown_field(self):
        with pytest.raises(RunSpecError) as info:
            load_run_spec("kind: shape\nmesh: obj\nlearning_rate: 1\n")
        assert info.value.field == "learning_rate"

    def test_unknown_nested_field(self):
        with pytest.raises(RunSpecError, match="settings.samples"):
            load_run_spec("kind: shape\nmesh: obj\nsettings: {samples: 3}\n")

    def test_bad_kind(self):
        with pytest.raises(RunSpecError, match="kind"):
            load_run_spec("kind: texture\n")

    def test_shape_needs_mesh(self):
        with pytest.raises(RunSpecError, match="mesh"):
            load_run_spec("kind: shape\n")

    def test_not_yaml(self):
        with pytest.raises(RunSpecError):
            load_run_spec("kind: [shape\n")

    def test_view_out_of_range(self, files):
        scene = load_scene(files["scene"].read_text(), files["scene"].parent)
        spec = load_run_spec(TINY_MATERIAL).with_overrides(views=[0, 7])
        with pytest.raises(RunSpecError, match="views"):
            build_problem(scene, spec, 0)

    def test_random_blob_deterministic(self):
        a, b = random_blob(3), random_blob(3)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        assert not np.array_equal(a.vertices, random_blob(4).vertices)


class TestRender:
    def test_empty_scene_png(self, tmp_path):
        scene = tmp_path / "empty.yaml"
        scene.write_text("materials: {}\nmeshes: []\nenvironment: {type: constant, radiance: [1, 1, 1]}\n"
                         "cameras:\n  - {origin: [0, 0, 3], look_at: [0, 0, 0], fov: 40, resolution: [5, 4]}\n")
        assert cli.main(["render", "--scene", str(scene), "--out", str(tmp_path / "out"), "--spp", "2"]) == 0
        png = read_png(tmp_path / "out" / "view_0.png")
        expected = np.round(tonemap_array(np.ones(3)) * 255).astype(np.uint8)
        assert png.data.shape == (4, 5, 3)
        assert np.all(np.round(png.data * 255).astype(np.uint8) == expected)

    def test_fibonacci_rig(self, tmp_path):
        scene = tmp_path / "rig.yaml"
        scene.write_text(TINY_SCENE.replace("count: 3", "count: 25").replace("[8, 8]", "[4, 4]"))
        out = tmp_path / "out"
        assert cli.main(["render", "--scene", str(scene), "--out", str(out), "--spp", "1"]) == 0
        assert len(list(out.glob("view_*.pfm"))) == 25
        assert len(list(out.glob("view_*.png"))) == 25
        doc = cli.load_manifest(out)
        assert len(doc["outputs"]) == 50

    def test_invalid_scene(self, tmp_path, capsys):
        scene = tmp_path / "bad.yaml"
        scene.write_text("materials: {m: {type: velvet}}\nmeshes: []\nenvironment: {type: constant}\ncameras: []\n")
        assert cli.main(["render", "--scene", str(scene), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "error" in err and "velvet" in err

    def test_missing_scene(self, tmp_path, capsys):
        assert cli.main(["render", "--scene", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_camera_out_of_range(self, files, tmp_path, capsys):
        assert cli.main(["render", "--scene", str(files["scene"]), "--camera", "9", "--out",
                         str(tmp_path / "o"), "--spp", "1"]) == 1
        assert "out of range" in capsys.readouterr().err


def manifest_covers_everything(out: Path):
    doc = cli.load_manifest(out)
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {cli.MANIFEST}
    assert set(doc["outputs"]) == on_disk
    return doc


class TestRuns:
    def test_baseline_directory(self, files, tmp_path):
        out = tmp_path / "base"
        assert cli.main(["baseline", "--scene", str(files["scene"]), "--config", str(files["material"]),
                         "--out", str(out)]) == 0
        doc = manifest_covers_everything(out)
        assert doc["command"] == "baseline"
        assert (out / "log.csv").exists()
        assert list((out / "images").glob("epoch_0_view_*.png"))
        cols, rows = read_log_csv(out / "log.csv")
        assert cols == ["epoch", "view", "loss", "sim_mean", "sim_pixel", "sim_tinyconv", "lr"]
        assert len(rows) == 2 * 3

    def test_baseline_repeat_bit_identical(self, files, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["baseline", "--scene", str(files["scene"]), "--config", str(files["material"]),
                             "--out", str(tmp_path / d), "--seed", "5"]) == 0
        assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()

    def test_reconstruct_shape(self, files, tmp_path):
        out = tmp_path / "rec"
        assert cli.main(["reconstruct", "--scene", str(files["scene"]), "--config", str(files["shape"]),
                         "--extractor", "tinyconv", "--out", str(out), "--views", "2"]) == 0
        doc = manifest_covers_everything(out)
        assert doc["extractor"] == "tinyconv"
        assert doc["run_config"]["loss"]["kind"] == "FeatureDistance"
        assert (out / "meshes").is_dir() and list((out / "meshes").glob("epoch_*.obj"))
        assert (out / "latents_tinyconv.npz").exists()

    def test_unknown_extractor_rejected(self, files, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["reconstruct", "--scene", str(files["scene"]), "--config", str(files["shape"]),
                      "--extractor", "vgg", "--out", str(tmp_path / "x")])

    def test_invalid_config(self, files, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("kind: material\nmaterial: m\nloss: l2\n")
        assert cli.main(["baseline", "--scene", str(files["scene"]), "--config", str(bad),
                         "--out", str(tmp_path / "o")]) == 1
        assert "loss" in capsys.readouterr().err


def fake_run(path: Path, series, extractor="tinyconv"):
    path.mkdir(parents=True)
    log = RunLog((extractor,))
    for e, sims in enumerate(series):
        for v, s in enumerate(sims):
            log.records.append({"epoch": e, "view": v, "loss": 0.1, "sim_mean": s, f"sim_{extractor}": s,
                                "lr": 0.1})
    log.write_csv(path / "log.csv")
    cli.write_manifest(path, {"command": "baseline", "extractor": extractor}, ["log.csv"])
    return path


class TestAnalyze:
    def test_known_maxima(self, tmp_path):
        run = fake_run(tmp_path / "run", [[0.90, 0.92], [0.991, 0.991], [0.95, 0.96]])
        base = fake_run(tmp_path / "base", [[0.983, 0.983], [0.97, 0.975]])
        doc = cli.cmd_analyze(run, base)
        v = doc["verdict"]
        assert (v["Top Sim"], v["Top Base"], v["Similarity Difference"], v["Metamer"]) == \
               ("0.991", "0.983", "0.008", "yes")
        with open(tmp_path / "run" / "analysis" / "verdict.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["Similarity Difference"] == "0.008"
        assert (tmp_path / "run" / "analysis" / "plots" / "similarity.svg").read_text().startswith("<?xml")

    def test_identical_directories(self, tmp_path):
        run = fake_run(tmp_path / "run", [[0.5, 0.7], [0.8, 0.6]])
        doc = cli.cmd_analyze(run, run, out=tmp_path / "an")
        assert doc["verdict"]["Similarity Difference"] == "0.000"
        assert doc["verdict"]["Metamer"] == "yes"

    def test_missing_baseline(self, tmp_path, capsys):
        run = fake_run(tmp_path / "run", [[0.5]])
        code = cli.main(["analyze", "--run", str(run), "--baseline", str(tmp_path / "nothing")])
        assert code != 0
        assert "baseline directory not found" in capsys.readouterr().err

    def test_tampered_output(self, tmp_path, capsys):
        run = fake_run(tmp_path / "run", [[0.5]])
        base = fake_run(tmp_path / "base", [[0.4]])
        with open(base / "log.csv", "a") as fh:
            fh.write("1,0,0.1,0.9,0.9,0.1\n")
        assert cli.main(["analyze", "--run", str(run), "--baseline", str(base)]) == 1
        assert "hash" in capsys.readouterr().err

    def test_svg_deterministic(self, tmp_path):
        run = fake_run(tmp_path / "run", [[0.5, 0.7], [0.8, 0.6]])
        base = fake_run(tmp_path / "base", [[0.4, 0.6]])
        cli.cmd_analyze(run, base, out=tmp_path / "a1")
        cli.cmd_analyze(run, base, out=tmp_path / "a2")
        assert (tmp_path / "a1/plots/similarity.svg").read_bytes() == (tmp_path / "a2/plots/similarity.svg").read_bytes()


class TestEcdf:
    def test_too_few_samples(self, files, tmp_path):
        with pytest.raises(SystemExit) as info:
            cli.main(["ecdf", "--scene", str(files["scene"]), "--config", str(files["shape"]), "--extractor",
                      "tinyconv", "--n-null", "0", "--out", str(tmp_path / "e")])
        assert info.value.code == 2
        with pytest.raises(ValueError):
            cli.cmd_ecdf(files["scene"], files["shape"], tmp_path / "e", "tinyconv", 10, 2)

    def test_outputs(self, files, tmp_path):
        out = tmp_path / "e"
        assert cli.main(["ecdf", "--scene", str(files["scene"]), "--config", str(files["shape"]),
                         "--extractor", "tinyconv", "--n-null", "10", "--n-seeds", "3", "--views", "2",
                         "--out", str(out)]) == 0
        doc = cli.load_manifest(out)
        assert set(doc["outputs"]) == {"ecdf_null.csv", "ecdf_seeds.csv", "ecdf_baseline.csv", "plots/ecdf.svg",
                                       "summary.json"}
        # seed and ground-truth run directories carry their own logs
        assert (out / "seed_0" / "log.csv").exists() and (out / "ground_truth" / "log.csv").exists()
        counts = {"null": 10, "seeds": 3, "baseline": 2}
        for name, n in counts.items():
            with open(out / f"ecdf_{name}.csv") as fh:
                rows = list(csv.DictReader(fh))
            assert len(rows) == n
            vals = [float(r["value"]) for r in rows]
            probs = [float(r["cumulative"]) for r in rows]
            assert vals == sorted(vals)
            assert all(b >= a for a, b in zip(probs, probs[1:])) and probs[-1] == 1.0
        summary = json.loads((out / "summary.json").read_text())
        assert summary == doc["summary"]

