"""Scene description: meshes, materials, environment light and cameras.

Scenes are plain immutable dataclasses. ``load_scene`` parses a YAML document
into a validated :class:`SceneDescription` and ``serialize_scene`` writes one
back out so that ``load_scene(serialize_scene(s)) == s``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import yaml

__all__ = [
    "SceneError", "SceneSyntaxError", "SceneValidationError", "ResourceLimitError",
    "Mesh", "CameraSpec", "ConstantEnv", "LatLongEnv", "ConstantRGB", "Checkerboard",
    "Texture", "Diffuse", "PrincipledLite", "MeshInstance", "GroundPlane",
    "SceneDescription", "fibonacci_camera_origins", "fibonacci_cameras", "make_icosphere",
    "make_plane", "compute_vertex_normals", "load_scene", "serialize_scene",
    "read_obj", "write_obj", "env_preset",
]

MAX_ICOSPHERE_SUBDIVISIONS = 8
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class SceneError(ValueError):
    pass


class SceneSyntaxError(SceneError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class SceneValidationError(SceneError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class ResourceLimitError(ValueError):
    pass


def _vec3(value, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64).reshape(-1)
    except (TypeError, ValueError):
        raise SceneValidationError(name, f"expected three numbers, got {value!r}") from None
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise SceneValidationError(name, f"expected three finite numbers, got {value!r}")
    return arr


def _arrays_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with per-vertex normals and optional per-vertex UVs."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    uvs: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise SceneValidationError("mesh.faces", "face index out of range")
        if self.normals is None:
            object.__setattr__(self, "normals", compute_vertex_normals(v, f))
        else:
            object.__setattr__(self, "normals",
                               np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3))
        if self.uvs is not None:
            object.__setattr__(self, "uvs",
                               np.ascontiguousarray(self.uvs, dtype=np.float64).reshape(-1, 2))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) array."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def validate(self, name: str = "mesh") -> None:
        nv = len(self.vertices)
        if nv == 0 or len(self.faces) == 0:
            raise SceneValidationError(name, "mesh needs at least one face")
        if self.faces.min() < 0 or self.faces.max() >= nv:
            raise SceneValidationError(name, "face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise SceneValidationError(name, "degenerate face with repeated vertex index")
        if not np.all(np.isfinite(self.vertices)):
            raise SceneValidationError(name, "non-finite vertex position")
        if self.uvs is not None and len(self.uvs) != nv:
            raise SceneValidationError(name, "uv count differs from vertex count")

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), self.faces, None, self.uvs)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (_arrays_equal(self.vertices, other.vertices) and _arrays_equal(self.faces, other.faces)
                and _arrays_equal(self.normals, other.normals) and _arrays_equal(self.uvs, other.uvs))

    __hash__ = None


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    p0, p1, p2 = (vertices[faces[:, i]] for i in range(3))
    fn = np.cross(p1 - p0, p2 - p0)
    vn = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(vn, faces[:, i], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(norm > 0, norm, 1.0)


def subdivide_midpoints(vertices: np.ndarray, faces: np.ndarray, uvs: np.ndarray | None = None):
    """Split every triangle into four through deduplicated edge midpoints.

    Returns ``(vertices, faces, uvs, edges)`` where new vertex ``V + k`` is the
    midpoint of ``edges[k]``.
    """
    nv = len(vertices)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e_sorted = np.sort(e, axis=1)
    edges, inverse = np.unique(e_sorted, axis=0, return_inverse=True)
    inverse = inverse.reshape(3, -1)
    mid = nv + inverse
    m01, m12, m20 = mid[0], mid[1], mid[2]
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate([
        np.stack([a, m01, m20], axis=1),
        np.stack([m01, b, m12], axis=1),
        np.stack([m20, m12, c], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ])
    new_vertices = np.concatenate([vertices, 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])])
    new_uvs = None
    if uvs is not None:
        new_uvs = np.concatenate([uvs, 0.5 * (uvs[edges[:, 0]] + uvs[edges[:, 1]])])
    return new_vertices, new_faces, new_uvs, edges


def _sphere_uvs(vertices: np.ndarray) -> np.ndarray:
    d = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    u = (np.arctan2(d[:, 0], -d[:, 2]) / (2 * math.pi)) % 1.0
    v = np.arccos(np.clip(d[:, 1], -1.0, 1.0)) / math.pi
    return np.stack([u, v], axis=1)


def make_icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0),
                   scale=(1.0, 1.0, 1.0)) -> Mesh:
    """Unit icosphere refined ``subdivisions`` times (``10 * 4**s + 2`` vertices).

    ``scale`` stretches the sphere along the axes afterwards, which is how the
    ellipsoid targets are built.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be non-negative")
    if subdivisions > MAX_ICOSPHERE_SUBDIVISIONS:
        raise ResourceLimitError(
            f"icosphere subdivision {subdivisions} exceeds limit {MAX_ICOSPHERE_SUBDIVISIONS}")
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        verts, faces, _, _ = subdivide_midpoints(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    uvs = _sphere_uvs(verts)
    verts = verts * radius * np.asarray(scale, dtype=np.float64) + np.asarray(center, dtype=np.float64)
    # area-weighted normals, the same rule the renderer applies to optimized meshes
    return Mesh(verts, faces, None, uvs)


def make_plane(size: float = 10.0, height: float = 0.0, center=(0.0, 0.0)) -> Mesh:
    """Square in the y = height plane facing +y, with UVs spanning [0, 1]^2."""
    h = size / 2.0
    cx, cz = center
    verts = np.array([[cx - h, height, cz - h], [cx + h, height, cz - h],
                      [cx + h, height, cz + h], [cx - h, height, cz + h]], dtype=np.float64)
    faces = np.array([[0, 2, 1], [0, 3, 2]], dtype=np.int64)
    uvs = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.float64)
    normals = np.tile([0.0, 1.0, 0.0], (4, 1))
    return Mesh(verts, faces, normals, uvs)


def read_obj(path: Union[str, Path]) -> Mesh:
    """Minimal Wavefront reader: ``v`` and ``f`` records, 1-based indices, polygons fanned."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise SceneSyntaxError(f"{path}: malformed vertex record", lineno, 1)
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise SceneSyntaxError(f"{path}: malformed face record", lineno, 1) from None
                if len(idx) < 3:
                    raise SceneSyntaxError(f"{path}: face with fewer than 3 vertices", lineno, 1)
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


def write_obj(path: Union[str, Path], mesh: Mesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# Materials


@dataclass(frozen=True, eq=False)
class ConstantRGB:
    rgb: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rgb", np.asarray(self.rgb, dtype=np.float64).reshape(3))

    def __eq__(self, other):
        return isinstance(other, ConstantRGB) and _arrays_equal(self.rgb, other.rgb)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Checkerboard:
    """Procedural checker: colour A where floor(u*scale) + floor(v*scale) is even."""

    color_a: np.ndarray
    color_b: np.ndarray
    scale: float = 8.0

    def __post_init__(self):
        object.__setattr__(self, "color_a", np.asarray(self.color_a, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color_b", np.asarray(self.color_b, dtype=np.float64).reshape(3))

    def __eq__(self, other):
        return (isinstance(other, Checkerboard) and _arrays_equal(self.color_a, other.color_a)
                and _arrays_equal(self.color_b, other.color_b) and self.scale == other.scale)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Texture:
    """(H, W, 3) reflectance grid looked up bilinearly with wrap addressing."""

    texels: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.texels, dtype=np.float64)
        if t.ndim != 3 or t.shape[2] != 3:
            raise SceneValidationError("texture", f"expected (H, W, 3) texels, got {t.shape}")
        object.__setattr__(self, "texels", t)

    def __eq__(self, other):
        return isinstance(other, Texture) and _arrays_equal(self.texels, other.texels)

    __hash__ = None


Albedo = Union[ConstantRGB, Checkerboard, Texture]


def _albedo_values(albedo: Albedo) -> list[np.ndarray]:
    if isinstance(albedo, ConstantRGB):
        return [albedo.rgb]
    if isinstance(albedo, Checkerboard):
        return [albedo.color_a, albedo.color_b]
    return [albedo.texels]


@dataclass(frozen=True)
class Diffuse:
    albedo: Albedo


@dataclass(frozen=True)
class PrincipledLite:
    """Diffuse, GGX specular (Schlick, metallic blend) and rough dielectric transmission."""

    base_color: Albedo
    roughness: float = 0.5
    metallic: float = 0.0
    spec_trans: float = 0.0
    eta: float = 1.5
    anisotropy: float = 0.0


Material = Union[Diffuse, PrincipledLite]

# closed intervals except eta, whose lower end is open
MATERIAL_BOUNDS = {
    "roughness": (0.0, 1.0),
    "metallic": (0.0, 1.0),
    "spec_trans": (0.0, 1.0),
    "anisotropy": (0.0, 1.0),
    "eta": (1.0, 3.0),
}


def _validate_material(mid: str, mat) -> None:
    albedo = mat.albedo if isinstance(mat, Diffuse) else mat.base_color
    for arr in _albedo_values(albedo):
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise SceneValidationError(f"materials.{mid}.albedo", "reflectance must lie in [0, 1]")
    if isinstance(albedo, Checkerboard) and not albedo.scale > 0:
        raise SceneValidationError(f"materials.{mid}.albedo.scale", "must be positive")
    if isinstance(mat, PrincipledLite):
        for name in ("roughness", "metallic", "spec_trans", "anisotropy"):
            val = getattr(mat, name)
            if not 0.0 <= val <= 1.0:
                raise SceneValidationError(f"materials.{mid}.{name}", f"{val} outside [0, 1]")
        if not 1.0 < mat.eta <= 3.0:
            raise SceneValidationError(f"materials.{mid}.eta", f"{mat.eta} outside (1, 3]")


# ---------------------------------------------------------------------------
# Lights and cameras


@dataclass(frozen=True, eq=False)
class ConstantEnv:
    radiance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "radiance", np.asarray(self.radiance, dtype=np.float64).reshape(3))

    def __eq__(self, other):
        return isinstance(other, ConstantEnv) and _arrays_equal(self.radiance, other.radiance)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LatLongEnv:
    """Equirectangular environment, (H, W, 3) radiance, y up, rotation about y."""

    image: np.ndarray
    rotation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "image", np.ascontiguousarray(self.image, dtype=np.float64))

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    def __eq__(self, other):
        return (isinstance(other, LatLongEnv) and _arrays_equal(self.image, other.image)
                and self.rotation == other.rotation)

    __hash__ = None


EnvironmentLight = Union[ConstantEnv, LatLongEnv]


def env_preset(name: str, width: int = 64, height: int = 32) -> np.ndarray:
    """Smooth procedural environment maps used in place of captured HDRIs."""
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    theta = v[:, None] * math.pi
    phi = u[None, :] * 2 * math.pi
    dx = np.sin(theta) * np.sin(phi)
    dy = np.cos(theta) * np.ones_like(phi)
    dz = -np.sin(theta) * np.cos(phi)
    if name == "sky":
        up = np.clip(dy, 0, 1)[..., None]
        sky = np.array([0.45, 0.6, 1.0]) * (0.6 + 0.8 * up)
        ground = np.array([0.35, 0.28, 0.2]) * (0.6 + 0.4 * np.clip(-dy, 0, 1))[..., None]
        img = np.where(dy[..., None] >= 0, sky, ground)
        sun_dir = np.array([0.5, 0.6, 0.62])
        sun_dir /= np.linalg.norm(sun_dir)
        cos_sun = dx * sun_dir[0] + dy * sun_dir[1] + dz * sun_dir[2]
        img = img + np.array([4.0, 3.6, 3.0]) * np.exp((cos_sun - 1.0) / 0.02)[..., None]
    elif name == "studio":
        key = np.exp((dx * 0.7 + dy * 0.7 - 1.0) / 0.15)[..., None] * np.array([3.0, 2.8, 2.5])
        fill = np.exp((-dx * 0.8 + dz * 0.6 - 1.0) / 0.3)[..., None] * np.array([0.5, 0.7, 1.2])
        img = 0.25 + 0.15 * dy[..., None] + key + fill
    elif name == "garden":
        img = (np.stack([0.4 + 0.3 * dx, 0.5 + 0.3 * dy, 0.4 + 0.3 * dz], axis=-1)
               + 0.2 * np.sin(3 * phi)[..., None] * np.sin(theta)[..., None])
    else:
        raise SceneValidationError("environment.preset", f"unknown preset {name!r}")
    return np.clip(img, 0.0, None)


@dataclass(frozen=True, eq=False)
class CameraSpec:
    origin: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov: float = 45.0
    resolution: tuple[int, int] = (32, 32)

    def __post_init__(self):
        for name in ("origin", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def validate(self, name: str = "camera") -> None:
        if not 0.0 < self.fov < 180.0:
            raise SceneValidationError(f"{name}.fov", f"{self.fov} outside (0, 180)")
        if np.allclose(self.origin, self.look_at):
            raise SceneValidationError(f"{name}.origin", "origin coincides with look_at")
        if self.width < 1 or self.height < 1:
            raise SceneValidationError(f"{name}.resolution", "must be at least 1x1")
        fwd = self.look_at - self.origin
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12 * np.linalg.norm(fwd):
            raise SceneValidationError(f"{name}.up", "up is parallel to the viewing direction")

    def frame(self):
        """Orthonormal (right, up, forward) camera basis."""
        fwd = self.look_at - self.origin
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def __eq__(self, other):
        if not isinstance(other, CameraSpec):
            return NotImplemented
        return (_arrays_equal(self.origin, other.origin) and _arrays_equal(self.look_at, other.look_at)
                and _arrays_equal(self.up, other.up) and self.fov == other.fov
                and self.resolution == other.resolution)

    __hash__ = None


def fibonacci_camera_origins(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    """``n`` points on a sphere: golden-angle longitude, uniform-in-cosine latitude."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=np.float64)
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = GOLDEN_ANGLE * i
    pts = np.stack([np.cos(phi) * r, y, np.sin(phi) * r], axis=1)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return [c + radius * p for p in pts]


def fibonacci_cameras(n: int, radius: float, center=(0.0, 0.0, 0.0), fov: float = 45.0,
                      resolution=(32, 32)) -> list[CameraSpec]:
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for o in fibonacci_camera_origins(n, radius, center):
        d = (center - o) / radius
        # avoid an up vector parallel to the view direction at the poles
        up = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.99 else np.array([0.0, 0.0, 1.0])
        cams.append(CameraSpec(o, center, up, fov, resolution))
    return cams


# ---------------------------------------------------------------------------
# Scene


@dataclass(frozen=True)
class MeshInstance:
    id: str
    mesh: Mesh
    material: str


@dataclass(frozen=True, eq=False)
class GroundPlane:
    height: float = -1.0
    size: float = 10.0
    checker: Checkerboard = field(default_factory=lambda: Checkerboard([0.8, 0.8, 0.8], [0.2, 0.2, 0.2], 10.0))

    def __eq__(self, other):
        return (isinstance(other, GroundPlane) and self.height == other.height
                and self.size == other.size and self.checker == other.checker)

    __hash__ = None

    def mesh(self) -> Mesh:
        return make_plane(self.size, self.height)


GROUND_ID = "__ground__"


@dataclass(frozen=True)
class SceneDescription:
    meshes: tuple[MeshInstance, ...]
    materials: dict
    environment: EnvironmentLight
    cameras: tuple[CameraSpec, ...] = ()
    ground: GroundPlane | None = None

    def __post_init__(self):
        object.__setattr__(self, "meshes", tuple(self.meshes))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "materials", dict(self.materials))

    def validate(self) -> "SceneDescription":
        ids = set()
        for k, inst in enumerate(self.meshes):
            if inst.id in ids:
                raise SceneValidationError(f"meshes[{k}].id", f"duplicate mesh id {inst.id!r}")
            ids.add(inst.id)
            inst.mesh.validate(f"meshes.{inst.id}")
            if inst.material not in self.materials:
                raise SceneValidationError(f"meshes.{inst.id}.material",
                                           f"unknown material id {inst.material!r}")
        for mid, mat in self.materials.items():
            _validate_material(mid, mat)
        env = self.environment
        if isinstance(env, ConstantEnv):
            if not np.all(np.isfinite(env.radiance)) or env.radiance.min() < 0:
                raise SceneValidationError("environment.radiance", "must be finite and >= 0")
        elif isinstance(env, LatLongEnv):
            img = env.image
            if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
                raise SceneValidationError("environment.image", f"bad shape {img.shape}")
            if not np.all(np.isfinite(img)) or img.min() < 0:
                raise SceneValidationError("environment.image", "must be finite and >= 0")
        else:
            raise SceneValidationError("environment", "exactly one environment light is required")
        for k, cam in enumerate(self.cameras):
            cam.validate(f"cameras[{k}]")
        if self.ground is not None:
            for arr in (self.ground.checker.color_a, self.ground.checker.color_b):
                if arr.min() < 0 or arr.max() > 1:
                    raise SceneValidationError("ground.checker", "reflectance must lie in [0, 1]")
        return self

    def mesh(self, mesh_id: str) -> MeshInstance:
        for inst in self.meshes:
            if inst.id == mesh_id:
                return inst
        raise KeyError(mesh_id)

    def with_mesh(self, mesh_id: str, mesh: Mesh) -> "SceneDescription":
        self.mesh(mesh_id)
        meshes = tuple(dataclasses.replace(m, mesh=mesh) if m.id == mesh_id else m for m in self.meshes)
        return dataclasses.replace(self, meshes=meshes)

    def with_material(self, material_id: str, material) -> "SceneDescription":
        if material_id not in self.materials:
            raise KeyError(material_id)
        mats = dict(self.materials)
        mats[material_id] = material
        return dataclasses.replace(self, materials=mats)

    def with_cameras(self, cameras) -> "SceneDescription":
        return dataclasses.replace(self, cameras=tuple(cameras))

    def all_instances(self) -> list[tuple[str, Mesh, str]]:
        """Mesh instances including the ground plane, as (id, mesh, material id)."""
        out = [(m.id, m.mesh, m.material) for m in self.meshes]
        if self.ground is not None:
            out.append((GROUND_ID, self.ground.mesh(), GROUND_ID))
        return out

    def all_materials(self) -> dict:
        mats = dict(self.materials)
        if self.ground is not None:
            mats[GROUND_ID] = Diffuse(self.ground.checker)
        return mats

    def bounding_radius(self, center=(0.0, 0.0, 0.0)) -> float:
        c = np.asarray(center, dtype=np.float64)
        return max(float(np.linalg.norm(m.mesh.vertices - c, axis=1).max()) for m in self.meshes)


# ---------------------------------------------------------------------------
# Structured text I/O


def _get(d: dict, key: str, path: str, default=...):
    if not isinstance(d, dict):
        raise SceneValidationError(path, f"expected a mapping, got {type(d).__name__}")
    if key not in d:
        if default is ...:
            raise SceneValidationError(f"{path}.{key}", "missing required field")
        return default
    return d[key]


def _number(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneValidationError(name, f"expected a number, got {value!r}")
    return float(value)


def _parse_albedo(spec, path: str, base_dir: Path) -> Albedo:
    if isinstance(spec, (list, tuple)):
        return ConstantRGB(_vec3(spec, path))
    if isinstance(spec, dict):
        if "checkerboard" in spec:
            c = spec["checkerboard"]
            return Checkerboard(_vec3(_get(c, "color_a", path), f"{path}.color_a"),
                                _vec3(_get(c, "color_b", path), f"{path}.color_b"),
                                _number(_get(c, "scale", path, 8.0), f"{path}.scale"))
        if "texture" in spec:
            t = spec["texture"]
            if "data" in t:
                data = np.asarray(t["data"], dtype=np.float64)
            elif "path" in t:
                from .render.image import read_pfm
                data = read_pfm(base_dir / t["path"]).data
            else:
                w = int(_get(t, "width", path))
                h = int(_get(t, "height", path))
                fill = _vec3(_get(t, "fill", path, [0.5, 0.5, 0.5]), f"{path}.fill")
                data = np.tile(fill, (h, w, 1))
            if data.ndim != 3 or data.shape[2] != 3:
                raise SceneValidationError(f"{path}.texture", f"expected (H, W, 3) data, got {data.shape}")
            return Texture(data)
    raise SceneValidationError(path, f"unsupported albedo specification {spec!r}")


def _parse_material(mid: str, spec: dict, base_dir: Path):
    path = f"materials.{mid}"
    kind = _get(spec, "type", path)
    if kind == "diffuse":
        return Diffuse(_parse_albedo(_get(spec, "albedo", path), f"{path}.albedo", base_dir))
    if kind == "principled":
        kw = {}
        for name in ("roughness", "metallic", "spec_trans", "eta", "anisotropy"):
            if name in spec:
                kw[name] = _number(spec[name], f"{path}.{name}")
        return PrincipledLite(_parse_albedo(_get(spec, "base_color", path), f"{path}.base_color", base_dir), **kw)
    raise SceneValidationError(f"{path}.type", f"unknown material type {kind!r}")


def _parse_geometry(spec: dict, path: str, base_dir: Path) -> Mesh:
    kind = _get(spec, "type", path)
    if kind == "icosphere":
        return make_icosphere(int(spec.get("subdivisions", 3)), float(spec.get("radius", 1.0)),
                              _vec3(spec.get("center", [0, 0, 0]), f"{path}.center"),
                              _vec3(spec.get("scale", [1, 1, 1]), f"{path}.scale"))
    if kind == "plane":
        return make_plane(float(spec.get("size", 10.0)), float(spec.get("height", 0.0)))
    if kind == "obj":
        return read_obj(base_dir / _get(spec, "path", path))
    if kind == "inline":
        uvs = spec.get("uvs")
        normals = spec.get("normals")
        return Mesh(np.asarray(_get(spec, "vertices", path), dtype=np.float64),
                    np.asarray(_get(spec, "faces", path), dtype=np.int64),
                    None if normals is None else np.asarray(normals, dtype=np.float64),
                    None if uvs is None else np.asarray(uvs, dtype=np.float64))
    raise SceneValidationError(f"{path}.type", f"unknown geometry type {kind!r}")


def _parse_environment(spec: dict, base_dir: Path) -> EnvironmentLight:
    kind = _get(spec, "type", "environment")
    if kind == "constant":
        return ConstantEnv(_vec3(_get(spec, "radiance", "environment"), "environment.radiance"))
    if kind == "latlong":
        rot = float(spec.get("rotation", 0.0))
        if "preset" in spec:
            img = env_preset(spec["preset"], int(spec.get("width", 64)), int(spec.get("height", 32)))
        elif "path" in spec:
            from .render.image import read_pfm
            img = read_pfm(base_dir / spec["path"]).data
        elif "data" in spec:
            img = np.asarray(spec["data"], dtype=np.float64)
        else:
            raise SceneValidationError("environment", "latlong needs one of preset, path or data")
        return LatLongEnv(img, rot)
    raise SceneValidationError("environment.type", f"unknown environment type {kind!r}")


def _parse_cameras(specs, bounding_radius: float) -> list[CameraSpec]:
    cams = []
    if not isinstance(specs, list):
        raise SceneValidationError("cameras", "expected a list")
    for k, c in enumerate(specs):
        path = f"cameras[{k}]"
        fov = _number(c.get("fov", 45.0), f"{path}.fov")
        res = c.get("resolution", [32, 32])
        if "fibonacci" in c:
            fib = c["fibonacci"]
            center = _vec3(fib.get("center", [0, 0, 0]), f"{path}.fibonacci.center")
            radius = float(fib.get("radius", 3.0 * bounding_radius))
            cams.extend(fibonacci_cameras(int(_get(fib, "count", path)), radius, center, fov, res))
        else:
            cams.append(CameraSpec(_vec3(_get(c, "origin", path), f"{path}.origin"),
                                   _vec3(_get(c, "look_at", path), f"{path}.look_at"),
                                   _vec3(c.get("up", [0, 1, 0]), f"{path}.up"), fov, tuple(res)))
    return cams


def load_scene(config_text: str, base_dir: Union[str, Path] = ".") -> SceneDescription:
    """Parse and validate a YAML scene document.

    Raises :class:`SceneSyntaxError` (with line/column) when the text does
    not parse and :class:`SceneValidationError` naming the offending field
    when it parses but violates an invariant.
    """
    base_dir = Path(base_dir)
    try:
        doc = yaml.safe_load(config_text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise SceneSyntaxError(f"scene config does not parse: {exc.problem}",
                               mark.line + 1 if mark else None, mark.column + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise SceneSyntaxError("scene config must be a mapping at top level", 1, 1)
    materials = {str(mid): _parse_material(str(mid), spec, base_dir)
                 for mid, spec in (_get(doc, "materials", "scene") or {}).items()}
    meshes = []
    for k, m in enumerate(_get(doc, "meshes", "scene") or []):
        path = f"meshes[{k}]"
        mesh = _parse_geometry(_get(m, "geometry", path), f"{path}.geometry", base_dir)
        meshes.append(MeshInstance(str(_get(m, "id", path)), mesh, str(_get(m, "material", path))))
    env = _parse_environment(_get(doc, "environment", "scene"), base_dir)
    radius = max([float(np.linalg.norm(m.mesh.vertices, axis=1).max()) for m in meshes] or [1.0])
    cams = _parse_cameras(doc.get("cameras", []), radius)
    ground = None
    if doc.get("ground") is not None:
        g = doc["ground"]
        checker = _parse_albedo(g.get("albedo", {"checkerboard": {"color_a": [0.8, 0.8, 0.8],
                                                                   "color_b": [0.2, 0.2, 0.2],
                                                                   "scale": 10.0}}),
                                "ground.albedo", base_dir)
        if not isinstance(checker, Checkerboard):
            raise SceneValidationError("ground.albedo", "ground plane takes a checkerboard")
        ground = GroundPlane(float(g.get("height", -1.0)), float(g.get("size", 10.0)), checker)
    return SceneDescription(tuple(meshes), materials, env, tuple(cams), ground).validate()


def _albedo_doc(a: Albedo):
    if isinstance(a, ConstantRGB):
        return a.rgb.tolist()
    if isinstance(a, Checkerboard):
        return {"checkerboard": {"color_a": a.color_a.tolist(), "color_b": a.color_b.tolist(),
                                 "scale": float(a.scale)}}
    return {"texture": {"data": a.texels.tolist()}}


def serialize_scene(scene: SceneDescription) -> str:
    """Inverse of :func:`load_scene`; meshes are written inline."""
    mats = {}
    for mid, m in scene.materials.items():
        if isinstance(m, Diffuse):
            mats[mid] = {"type": "diffuse", "albedo": _albedo_doc(m.albedo)}
        else:
            mats[mid] = {"type": "principled", "base_color": _albedo_doc(m.base_color),
                         "roughness": m.roughness, "metallic": m.metallic, "spec_trans": m.spec_trans,
                         "eta": m.eta, "anisotropy": m.anisotropy}
    meshes = []
    for inst in scene.meshes:
        geo = {"type": "inline", "vertices": inst.mesh.vertices.tolist(), "faces": inst.mesh.faces.tolist(),
               "normals": inst.mesh.normals.tolist()}
        if inst.mesh.uvs is not None:
            geo["uvs"] = inst.mesh.uvs.tolist()
        meshes.append({"id": inst.id, "material": inst.material, "geometry": geo})
    env = scene.environment
    if isinstance(env, ConstantEnv):
        env_doc = {"type": "constant", "radiance": env.radiance.tolist()}
    else:
        env_doc = {"type": "latlong", "data": env.image.tolist(), "rotation": env.rotation}
    cams = [{"origin": c.origin.tolist(), "look_at": c.look_at.tolist(), "up": c.up.tolist(),
             "fov": c.fov, "resolution": list(c.resolution)} for c in scene.cameras]
    doc = {"materials": mats, "meshes": meshes, "environment": env_doc, "cameras": cams}
    if scene.ground is not None:
        g = scene.ground
        doc["ground"] = {"height": g.height, "size": g.size, "albedo": _albedo_doc(g.checker)}
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
