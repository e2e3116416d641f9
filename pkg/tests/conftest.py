import numpy as np
import pytest

from metarender.scene import (CameraSpec, ConstantEnv, ConstantRGB, Diffuse, MeshInstance,
                              SceneDescription, make_icosphere)


def sphere_scene(albedo=(0.5, 0.5, 0.5), env=(1.0, 1.0, 1.0), subdivisions=3, resolution=(16, 16), material=None):
    mat = material if material is not None else Diffuse(ConstantRGB(albedo))
    cam = CameraSpec([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 40.0, resolution)
    return SceneDescription((MeshInstance("ball", make_icosphere(subdivisions), "m"),), {"m": mat},
                            ConstantEnv(env), (cam,)).validate()


@pytest.fixture
def ball():
    return sphere_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
