"""Laplacian-preconditioned vertex parameterization, midpoint tessellation and Chamfer distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .scene import Mesh, subdivide_midpoints

DIRECT_SOLVE_LIMIT = 100_000
CG_RTOL = 1e-8


class NonManifoldError(ValueError):
    def __init__(self, edges):
        self.edges = [tuple(int(i) for i in e) for e in edges]
        shown = ", ".join(map(str, self.edges[:10]))
        more = "" if len(self.edges) <= 10 else f" (+{len(self.edges) - 10} more)"
        super().__init__(f"non-manifold edges: {shown}{more}")


def edge_face_counts(faces: np.ndarray):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def check_manifold(mesh: Mesh, closed: bool = False) -> np.ndarray:
    """Return the unique edges; raise if any edge has more than two faces (or != 2 when ``closed``)."""
    edges, counts = edge_face_counts(mesh.faces)
    bad = counts != 2 if closed else counts > 2
    if bad.any():
        raise NonManifoldError(edges[bad])
    return edges


def uniform_laplacian(n_vertices: int, edges: np.ndarray) -> sp.csr_matrix:
    """Combinatorial Laplacian: vertex degree on the diagonal, -1 per neighbour."""
    i, j = edges[:, 0], edges[:, 1]
    adj = sp.coo_matrix((np.ones(2 * len(edges)), (np.concatenate([i, j]), np.concatenate([j, i]))),
                        shape=(n_vertices, n_vertices)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


@dataclass
class LaplacianSystem:
    """A = I + lambda * L for one mesh connectivity, with a cached solver."""

    n_vertices: int
    lam: float
    A: sp.csr_matrix
    L: sp.csr_matrix
    _solve: object = field(default=None, repr=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve A x = rhs column by column; rhs is (V,) or (V, k)."""
        rhs = np.asarray(rhs, dtype=np.float64)
        cols = rhs.reshape(self.n_vertices, -1)
        out = np.empty_like(cols)
        for k in range(cols.shape[1]):
            out[:, k] = self._solve(cols[:, k])
        return out.reshape(rhs.shape)

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        r = self.A @ x.reshape(self.n_vertices, -1) - rhs.reshape(self.n_vertices, -1)
        return float(np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300))


def build_laplacian(mesh: Mesh, lam: float) -> LaplacianSystem:
    if not lam >= 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    edges = check_manifold(mesh)
    n = mesh.n_vertices
    L = uniform_laplacian(n, edges)
    A = (sp.identity(n, format="csr") + lam * L).tocsc()
    if lam == 0:
        solve = np.array
    elif n <= DIRECT_SOLVE_LIMIT:
        solve = spla.factorized(A)
    else:
        M = sp.diags(1.0 / A.diagonal())

        def solve(b):
            x, info = spla.cg(A, b, rtol=CG_RTOL, M=M, maxiter=10 * n)
            if info != 0:
                raise RuntimeError(f"conjugate gradient did not converge (info={info})")
            return x
    return LaplacianSystem(n, float(lam), A.tocsr(), L, solve)


def to_differential(x: np.ndarray, system: LaplacianSystem) -> np.ndarray:
    """u = A x for a flat or (V, 3) vertex array; returns the same layout."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != 3 * system.n_vertices:
        raise ValueError(f"expected {3 * system.n_vertices} values, got {x.size}")
    return (system.A @ x.reshape(-1, 3)).reshape(x.shape)


def from_differential(u: np.ndarray, system: LaplacianSystem) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.size != 3 * system.n_vertices:
        raise ValueError(f"expected {3 * system.n_vertices} values, got {u.size}")
    return system.solve(u.reshape(-1, 3)).reshape(u.shape)


def pullback_gradient(grad_x: np.ndarray, system: LaplacianSystem) -> np.ndarray:
    """d loss / du from d loss / dx; A is symmetric so A^-T = A^-1."""
    return from_differential(grad_x, system)


def midpoint_tessellate(mesh: Mesh) -> Mesh:
    check_manifold(mesh, closed=True)
    v, f, uv, _ = subdivide_midpoints(mesh.vertices, mesh.faces, mesh.uvs)
    return Mesh(v, f, None, uv)


def euler_characteristic(mesh: Mesh) -> int:
    return mesh.n_vertices - len(mesh.edges()) + mesh.n_faces


# ---------------------------------------------------------------------------
# Chamfer distance


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform random points on the mesh surface."""
    p0, p1, p2 = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    f = rng.choice(len(area), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    a, b = 1.0 - s, s * (1.0 - r2)
    return a[:, None] * p0[f] + b[:, None] * p1[f] + (1.0 - a - b)[:, None] * p2[f]


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean squared nearest-neighbour distance a->b plus b->a."""
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da ** 2) + np.mean(db ** 2))


def chamfer_distance(mesh_a: Mesh, mesh_b: Mesh, n_samples: int = 20000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    return chamfer_points(sample_surface(mesh_a, n_samples, rng), sample_surface(mesh_b, n_samples, rng))
