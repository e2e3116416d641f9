import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metarender.scene import (Checkerboard, ConstantEnv, ConstantRGB, Diffuse, GroundPlane, LatLongEnv, Mesh,
                              MeshInstance, PrincipledLite, ResourceLimitError, SceneDescription,
                              SceneSyntaxError, SceneValidationError, Texture, env_preset,
                              fibonacci_camera_origins, fibonacci_cameras, load_scene, make_icosphere,
                              make_plane, read_obj, serialize_scene, write_obj)

MINIMAL = """
materials:
  m: {type: diffuse, albedo: [0.5, 0.5, 0.5]}
meshes:
  - {id: ball, material: m, geometry: {type: icosphere, subdivisions: 1}}
environment: {type: constant, radiance: [1, 1, 1]}
cameras:
  - {origin: [0, 0, 3], look_at: [0, 0, 0], fov: 40, resolution: [8, 8]}
"""


def reference_golden_points(n):
    # loop-based reimplementation used as the oracle
    ga = math.pi * (3.0 - math.sqrt(5.0))
    pts = []
    for i in range(n):
        y = 1.0 - 2.0 * (i + 0.5) / n
        r = math.sqrt(max(0.0, 1.0 - y * y))
        pts.append((math.cos(ga * i) * r, y, math.sin(ga * i) * r))
    return pts


def min_pairwise_angle(pts):
    best = math.pi
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            c = sum(a * b for a, b in zip(pts[i], pts[j]))
            best = min(best, math.acos(max(-1.0, min(1.0, c))))
    return best


class TestFibonacci:
    def test_single_point_unit_norm(self):
        (p,) = fibonacci_camera_origins(1, 1.0, (0, 0, 0))
        assert abs(np.linalg.norm(p) - 1.0) < 1e-9

    def test_twenty_five_views_on_sphere(self):
        pts = fibonacci_camera_origins(25, 1.0)
        assert len(pts) == 25
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)

    def test_min_separation_matches_brute_force(self):
        pts = np.array(fibonacci_camera_origins(100, 1.0))
        ref = reference_golden_points(100)
        np.testing.assert_allclose(pts, np.array(ref), atol=1e-12)
        G = np.clip(pts @ pts.T, -1, 1)
        np.fill_diagonal(G, -1)
        got = float(np.arccos(G.max()))
        assert got == pytest.approx(min_pairwise_angle(ref), abs=1e-9)
        # frozen from the brute-force oracle
        assert got >= 0.3102805409152178 - 1e-9

    @given(st.integers(1, 200), st.floats(0.1, 50.0),
           st.tuples(*[st.floats(-10, 10)] * 3))
    @settings(max_examples=40, deadline=None)
    def test_radius_and_center(self, n, radius, center):
        pts = np.array(fibonacci_camera_origins(n, radius, center))
        assert pts.shape == (n, 3)
        np.testing.assert_allclose(np.linalg.norm(pts - np.array(center), axis=1), radius, rtol=1e-12)

    def test_latitudes_uniform_in_cosine(self):
        pts = np.array(fibonacci_camera_origins(50, 1.0))
        np.testing.assert_allclose(pts[:, 1], 1 - 2 * (np.arange(50) + 0.5) / 50, atol=1e-12)

    def test_bit_identical_across_calls(self):
        a = np.array(fibonacci_camera_origins(33, 2.5, (1, 2, 3)))
        b = np.array(fibonacci_camera_origins(33, 2.5, (1, 2, 3)))
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("n,radius", [(0, 1.0), (-3, 1.0), (5, 0.0), (5, -1.0)])
    def test_invalid_arguments(self, n, radius):
        with pytest.raises(ValueError):
            fibonacci_camera_origins(n, radius)

    def test_cameras_look_at_center(self):
        cams = fibonacci_cameras(25, 3.5, fov=40, resolution=(8, 8))
        for c in cams:
            c.validate()
            _, _, fwd = c.frame()
            np.testing.assert_allclose(fwd, -c.origin / 3.5, atol=1e-12)


class TestIcosphere:
    @pytest.mark.parametrize("s,nv,nf", [(0, 12, 20), (1, 42, 80), (2, 162, 320), (3, 642, 1280)])
    def test_counts(self, s, nv, nf):
        m = make_icosphere(s)
        assert (m.n_vertices, m.n_faces) == (nv, nf)
        assert m.n_vertices == 10 * 4 ** s + 2

    @pytest.mark.parametrize("s", range(5))
    def test_unit_radius_and_euler(self, s):
        m = make_icosphere(s)
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-12)
        assert m.n_vertices - len(m.edges()) + m.n_faces == 2
        np.testing.assert_allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("s", [5, 6])
    def test_count_formula_larger(self, s):
        assert make_icosphere(s).n_vertices == 10 * 4 ** s + 2

    def test_resource_limit(self):
        with pytest.raises(ResourceLimitError):
            make_icosphere(9)

    def test_outward_orientation(self):
        m = make_icosphere(2)
        p = m.vertices[m.faces]
        fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        assert np.all(np.einsum("ij,ij->i", fn, p.mean(axis=1)) > 0)

    def test_scale_makes_ellipsoid(self):
        m = make_icosphere(2, scale=(1.0, 0.7, 1.3))
        np.testing.assert_allclose(np.abs(m.vertices).max(axis=0), [1.0, 0.7, 1.3], atol=1e-12)


def test_plane_faces_up():
    m = make_plane(4.0, -1.0)
    p = m.vertices[m.faces]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    assert np.all(fn[:, 1] > 0)


def test_obj_round_trip(tmp_path):
    m = make_icosphere(1, scale=(1, 0.5, 2))
    write_obj(tmp_path / "m.obj", m)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_obj_quads_are_fanned(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = read_obj(tmp_path / "q.obj")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_malformed_line_reported(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0 0\nv 1 0\n")
    with pytest.raises(SceneSyntaxError) as e:
        read_obj(tmp_path / "bad.obj")
    assert e.value.line == 2


class TestLoadScene:
    def test_minimal(self):
        s = load_scene(MINIMAL)
        assert len(s.meshes) == 1 and len(s.cameras) == 1
        assert isinstance(s.materials["m"], Diffuse)

    def test_roughness_out_of_range(self):
        text = MINIMAL.replace("{type: diffuse, albedo: [0.5, 0.5, 0.5]}",
                               "{type: principled, base_color: [0.5, 0.5, 0.5], roughness: 1.3}")
        with pytest.raises(SceneValidationError) as e:
            load_scene(text)
        assert "roughness" in e.value.field

    def test_missing_material_names_id(self):
        with pytest.raises(SceneValidationError) as e:
            load_scene(MINIMAL.replace("material: m", "material: steel"))
        assert "steel" in str(e.value)

    def test_syntax_error_has_position(self):
        with pytest.raises(SceneSyntaxError) as e:
            load_scene("materials: {m: [1, 2\nmeshes: [")
        assert e.value.line is not None and e.value.column is not None

    @pytest.mark.parametrize("bad,field", [
        ("fov: 40", "fov: 180"),
        ("radiance: [1, 1, 1]", "radiance: [1, -1, 1]"),
        ("albedo: [0.5, 0.5, 0.5]", "albedo: [0.5, 1.5, 0.5]"),
    ])
    def test_invariant_violations(self, bad, field):
        with pytest.raises(SceneValidationError):
            load_scene(MINIMAL.replace(bad, field))

    @pytest.mark.parametrize("eta,ok", [(1.0, False), (1.0001, True), (3.0, True), (3.01, False)])
    def test_eta_interval(self, eta, ok):
        text = MINIMAL.replace("{type: diffuse, albedo: [0.5, 0.5, 0.5]}",
                               f"{{type: principled, base_color: [0.5, 0.5, 0.5], eta: {eta}}}")
        if ok:
            assert load_scene(text).materials["m"].eta == eta
        else:
            with pytest.raises(SceneValidationError, match="eta"):
                load_scene(text)

    def test_fibonacci_rig_default_radius(self):
        text = MINIMAL.replace("- {origin: [0, 0, 3], look_at: [0, 0, 0], fov: 40, resolution: [8, 8]}",
                               "- {fibonacci: {count: 25}, fov: 45}")
        s = load_scene(text)
        assert len(s.cameras) == 25
        np.testing.assert_allclose([np.linalg.norm(c.origin) for c in s.cameras], 3.0, rtol=1e-12)

    def test_obj_geometry_relative_to_base(self, tmp_path):
        write_obj(tmp_path / "tri.obj", make_icosphere(0))
        text = MINIMAL.replace("{type: icosphere, subdivisions: 1}", "{type: obj, path: tri.obj}")
        assert load_scene(text, tmp_path).meshes[0].mesh.n_vertices == 12

    def test_degenerate_face_rejected(self):
        text = MINIMAL.replace("{type: icosphere, subdivisions: 1}",
                               "{type: inline, vertices: [[0,0,0],[1,0,0],[0,1,0]], faces: [[0,0,1]]}")
        with pytest.raises(SceneValidationError, match="degenerate"):
            load_scene(text)


def _rich_scene():
    tex = Texture(np.random.default_rng(0).uniform(size=(4, 5, 3)))
    mats = {"a": Diffuse(Checkerboard([0.9, 0.1, 0.1], [0.1, 0.1, 0.9], 4.0)),
            "b": PrincipledLite(tex, 0.3, 0.2, 0.5, 1.33, 0.4)}
    meshes = (MeshInstance("s", make_icosphere(1, 0.5), "a"), MeshInstance("t", make_icosphere(0, 0.3, (1, 0, 0)), "b"))
    return SceneDescription(meshes, mats, LatLongEnv(env_preset("sky", 8, 4), 0.25),
                            tuple(fibonacci_cameras(3, 2.0, resolution=(4, 6))), GroundPlane(-1.0, 6.0)).validate()


def test_serialize_round_trip():
    s = _rich_scene()
    assert load_scene(serialize_scene(s)) == s


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 100), min_size=3, max_size=3),
       st.floats(0, 1), st.floats(1.0001, 3.0))
@settings(max_examples=25, deadline=None)
def test_serialize_round_trip_property(albedo, radiance, rough, eta):
    s = SceneDescription((MeshInstance("x", make_icosphere(0), "m"),),
                         {"m": PrincipledLite(ConstantRGB(albedo), roughness=rough, eta=eta)},
                         ConstantEnv(radiance), ()).validate()
    assert load_scene(serialize_scene(s)) == s


def test_mesh_validation():
    with pytest.raises(SceneValidationError, match="out of range"):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])


@pytest.mark.parametrize("name", ["sky", "studio", "garden"])
def test_env_presets_non_negative(name):
    img = env_preset(name)
    assert img.shape == (32, 64, 3) and img.min() >= 0 and np.isfinite(img).all()


def test_unknown_preset():
    with pytest.raises(SceneValidationError):
        env_preset("moon")
