"""Differentiable parameters, image losses and gradient estimation.

Gradients come from two terms. The interior term differentiates every path
contribution with sampled directions and densities held fixed; the paths are
regenerated from the same counter-based random streams as the forward pass
and the surrogate ``sum(adjoint * contribution)`` is backpropagated chunk by
chunk. For vertex positions a boundary term is added: silhouette edges seen
from the camera, and occluder edges seen from directly lit shading points,
are sampled explicitly and weighted by the radiance jump across the edge.
"""
from __future__ import annotations

import csv
import dataclasses
from collections import OrderedDict
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .scene import (ConstantRGB, PrincipledLite, SceneDescription, Texture, CameraSpec,
                    MATERIAL_BOUNDS)
from .render.image import HDRImage, DisplayImage, tonemap_torch, tonemap_array
from .render.integrator import (DTYPE, RenderSettings, compile_scene, iter_image_batches, render_compiled,
                                trace_paths, project_torch, camera_rays, surface_params, differentiable_hit,
                                CompiledScene)
from .render.sampling import DOMAIN_PRIMARY_EDGE, DOMAIN_SECONDARY_EDGE, UNIFORMS_PER_BOUNCE, stream_id, \
    stream_uniforms
from .render import bsdf as B

SECOND_BUFFER_SALT = 0x9E3779B97F4A7C15


class GradientError(RuntimeError):
    def __init__(self, name: str, diagnostics: dict):
        self.name = name
        self.diagnostics = diagnostics
        super().__init__(f"non-finite gradient for parameter {name!r}: {diagnostics}")


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class VertexPositions:
    mesh_id: str
    value: np.ndarray  # flat, 3 * V

    bounds = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64).reshape(-1).copy()
        if self.value.size % 3:
            raise ValueError("vertex array length must be a multiple of 3")

    def as_points(self) -> np.ndarray:
        return self.value.reshape(-1, 3)


@dataclass
class BsdfScalar:
    """One material field; ``base_color`` carries three channels, every other field one."""

    material_id: str
    field_name: str
    value: np.ndarray
    bounds: tuple = (0.0, 1.0)
    lower_open: bool = False

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64).copy()


@dataclass
class TextureTexels:
    material_id: str
    value: np.ndarray  # (H, W, 3)
    bounds: tuple = (0.0, 1.0)
    lower_open: bool = False

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64).copy()


Entry = Union[VertexPositions, BsdfScalar, TextureTexels]


class ParameterSet:
    """Ordered, uniquely named differentiable scene parameters."""

    def __init__(self, entries: dict | None = None):
        self.entries: OrderedDict[str, Entry] = OrderedDict()
        for name, e in (entries or {}).items():
            self.add(name, e)

    def add(self, name: str, entry: Entry) -> "ParameterSet":
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.entries[name] = entry
        return self

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self):
        return len(self.entries)

    def names(self):
        return list(self.entries)

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: dataclasses.replace(e, value=e.value.copy()) for n, e in self.entries.items()})

    def values(self) -> dict:
        return {n: e.value for n, e in self.entries.items()}

    def with_values(self, values: dict) -> "ParameterSet":
        out = self.copy()
        for n, v in values.items():
            e = out.entries[n]
            e.value = np.asarray(v, dtype=np.float64).reshape(e.value.shape).copy()
        return out

    @staticmethod
    def vertices(mesh_id: str, scene: SceneDescription) -> "ParameterSet":
        return ParameterSet({f"{mesh_id}.vertices": VertexPositions(mesh_id, scene.mesh(mesh_id).mesh.vertices)})

    @staticmethod
    def bsdf(material_id: str, scene: SceneDescription, fields) -> "ParameterSet":
        ps = ParameterSet()
        mat = scene.materials[material_id]
        for f in fields:
            ps.add(f"{material_id}.{f}", bsdf_entry(material_id, mat, f))
        return ps

    def merged(self, other: "ParameterSet") -> "ParameterSet":
        out = self.copy()
        for n, e in other:
            out.add(n, dataclasses.replace(e, value=e.value.copy()))
        return out

    def validate(self, scene: SceneDescription) -> None:
        for name, e in self:
            if isinstance(e, VertexPositions):
                mesh = scene.mesh(e.mesh_id).mesh
                if e.value.size != 3 * mesh.n_vertices:
                    raise ValueError(f"{name}: expected {3 * mesh.n_vertices} values, got {e.value.size}")
            else:
                if e.material_id not in scene.materials:
                    raise ValueError(f"{name}: unknown material {e.material_id!r}")
                lo, hi = e.bounds
                v = e.value
                if np.any(v > hi) or np.any(v < lo) or (e.lower_open and np.any(v <= lo)):
                    raise ValueError(f"{name}: value outside bounds {e.bounds}")

    def apply(self, scene: SceneDescription) -> SceneDescription:
        """Scene with every parameter value written back into it."""
        for _, e in self:
            if isinstance(e, VertexPositions):
                scene = scene.with_mesh(e.mesh_id, scene.mesh(e.mesh_id).mesh.with_vertices(e.as_points()))
            elif isinstance(e, TextureTexels):
                mat = scene.materials[e.material_id]
                field = "base_color" if isinstance(mat, PrincipledLite) else "albedo"
                scene = scene.with_material(e.material_id, dataclasses.replace(mat, **{field: Texture(e.value)}))
            else:
                mat = scene.materials[e.material_id]
                if e.field_name == "base_color":
                    field = "base_color" if isinstance(mat, PrincipledLite) else "albedo"
                    scene = scene.with_material(e.material_id,
                                                dataclasses.replace(mat, **{field: ConstantRGB(e.value)}))
                else:
                    scene = scene.with_material(e.material_id,
                                                dataclasses.replace(mat, **{e.field_name: float(e.value)}))
        return scene


def bsdf_entry(material_id: str, mat, field: str) -> Entry:
    if field in ("base_color", "albedo"):
        albedo = mat.base_color if isinstance(mat, PrincipledLite) else mat.albedo
        if isinstance(albedo, Texture):
            return TextureTexels(material_id, albedo.texels)
        if not isinstance(albedo, ConstantRGB):
            raise ValueError(f"{material_id}: only constant or texture albedo can be optimized")
        return BsdfScalar(material_id, "base_color", albedo.rgb, (0.0, 1.0))
    if field == "texels":
        albedo = mat.base_color if isinstance(mat, PrincipledLite) else mat.albedo
        if not isinstance(albedo, Texture):
            raise ValueError(f"{material_id}: material has no texture")
        return TextureTexels(material_id, albedo.texels)
    if not isinstance(mat, PrincipledLite):
        raise ValueError(f"{material_id}: diffuse materials only expose base_color")
    lo, hi = MATERIAL_BOUNDS[field]
    return BsdfScalar(material_id, field, getattr(mat, field), (lo, hi), field == "eta")


class GradientSet(OrderedDict):
    """Parameter name -> gradient array shaped like the parameter value."""

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.values()]) if self else np.zeros(0)

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["entry", "component", "value"])
            for name, g in self.items():
                for i, v in enumerate(np.ravel(g)):
                    w.writerow([name, i, repr(float(v))])


# ---------------------------------------------------------------------------
# Losses


@dataclass(frozen=True)
class MAE:
    space: str = "display"


@dataclass(frozen=True)
class DualBuffer:
    squared: bool = True
    space: str = "display"


@dataclass(frozen=True)
class FeatureDistance:
    extractor_id: str
    space: str = "display"


LossKind = Union[MAE, DualBuffer, FeatureDistance]


def _arr(img):
    if isinstance(img, (HDRImage, DisplayImage)):
        return img.data
    return np.asarray(img, dtype=np.float64)


def _check_same(*arrs):
    s = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != s:
            raise ValueError(f"image dimensions differ: {s} vs {a.shape}")


def loss_mae(render, target) -> float:
    """Mean absolute difference over all pixels and channels."""
    r, t = _arr(render), _arr(target)
    _check_same(r, t)
    return float(np.mean(np.abs(r - t)))


def loss_dual_buffer(render_a, render_b, target, squared: bool = True) -> float:
    """Mean of ((a - y) * (b - y))**2 over pixel channels; ``squared=False`` drops the outer square."""
    a, b, y = _arr(render_a), _arr(render_b), _arr(target)
    _check_same(a, b, y)
    prod = (a - y) * (b - y)
    return float(np.mean(prod * prod if squared else prod))


def _to_space(x: torch.Tensor, space: str) -> torch.Tensor:
    if space == "display":
        return tonemap_torch(x)
    if space == "hdr":
        return x
    raise ValueError(f"unknown loss space {space!r}")


def _target_tensor(target, space: str) -> torch.Tensor:
    if isinstance(target, DisplayImage):
        if space != "display":
            raise ValueError("display-space target given for an HDR loss")
        return torch.as_tensor(target.data)
    t = torch.as_tensor(_arr(target))
    return tonemap_torch(t) if space == "display" else t


def n_buffers(loss: LossKind) -> int:
    return 2 if isinstance(loss, DualBuffer) else 1


def loss_torch(loss: LossKind, images: list, target) -> torch.Tensor:
    """Loss on (H, W, 3) HDR tensors; ``target`` is an image or, for features, a target embedding."""
    if isinstance(loss, MAE):
        return torch.mean(torch.abs(_to_space(images[0], loss.space) - _target_tensor(target, loss.space)))
    if isinstance(loss, DualBuffer):
        y = _target_tensor(target, loss.space)
        prod = (_to_space(images[0], loss.space) - y) * (_to_space(images[1], loss.space) - y)
        return torch.mean(prod * prod) if loss.squared else torch.mean(prod)
    if isinstance(loss, FeatureDistance):
        from .features import feature_loss
        return feature_loss(loss.extractor_id, tonemap_torch(images[0]), target)
    raise TypeError(f"unknown loss kind {loss!r}")


# ---------------------------------------------------------------------------
# Gradient estimation


@dataclass(frozen=True)
class BoundaryConfig:
    enabled: bool = True
    primary_samples_per_pixel: float = 1.0
    secondary_samples_per_pixel: float = 0.25
    offset: float = 1e-4          # pixels for camera edges, radians for shadow edges


def _leaves(params: ParameterSet):
    vert, mats, leaves = {}, {}, {}
    for name, e in params:
        t = torch.tensor(e.value, dtype=DTYPE, requires_grad=True)
        leaves[name] = t
        if isinstance(e, VertexPositions):
            vert[e.mesh_id] = t.reshape(-1, 3)
        elif isinstance(e, TextureTexels):
            mats.setdefault(e.material_id, {})["texels"] = t
        else:
            mats.setdefault(e.material_id, {})[e.field_name] = t
    return vert, mats, leaves


def buffer_seed(seed: int, k: int) -> int:
    return seed if k == 0 else (seed ^ (SECOND_BUFFER_SALT * k)) & 0xFFFFFFFFFFFFFFFF


def _mesh_edges(faces: np.ndarray):
    """Unique edges with their one or two adjacent faces (second = -1 on borders)."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces)), 3)
    e.sort(axis=1)
    uniq, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    order = np.argsort(inv, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    f0 = fid[order[starts]]
    f1 = np.where(counts >= 2, fid[order[np.minimum(starts + 1, len(order) - 1)]], -1)
    return uniq, f0, f1


def _edge_tables(cs: CompiledScene, mesh_ids):
    """Global edge endpoints and adjacent faces for the differentiable meshes."""
    A, Bv, F0, F1 = [], [], [], []
    for mid in mesh_ids:
        voff, _, foff, nf = cs.instance_ranges[mid]
        faces = cs.faces[foff:foff + nf] - voff
        e, f0, f1 = _mesh_edges(faces)
        A.append(e[:, 0] + voff)
        Bv.append(e[:, 1] + voff)
        F0.append(f0 + foff)
        F1.append(np.where(f1 >= 0, f1 + foff, -1))
    return np.concatenate(A), np.concatenate(Bv), np.concatenate(F0), np.concatenate(F1)


def _face_geometry(P: np.ndarray, faces: np.ndarray):
    p0, p1, p2 = P[faces[:, 0]], P[faces[:, 1]], P[faces[:, 2]]
    n = np.cross(p1 - p0, p2 - p0)
    return (p0 + p1 + p2) / 3.0, n


def primary_edge_surrogate(cs: CompiledScene, cam: CameraSpec, settings: RenderSettings, adj: np.ndarray,
                           mesh_ids, n_samples: int, seed: int, offset: float) -> torch.Tensor | None:
    """Camera-silhouette boundary term as a scalar whose gradient is the term itself."""
    if n_samples <= 0:
        return None
    Pd = cs.P.detach().numpy()
    a, b, f0, f1 = _edge_tables(cs, mesh_ids)
    centers, normals = _face_geometry(Pd, cs.faces)
    facing = np.sign(((centers - cam.origin) * normals).sum(1))
    sil = np.where(f1 >= 0, facing[f0] != facing[np.maximum(f1, 0)], True)
    right, up, fwd = cam.frame()
    za = (Pd[a] - cam.origin) @ fwd
    zb = (Pd[b] - cam.origin) @ fwd
    sil &= (za > 1e-6) & (zb > 1e-6)
    if not sil.any():
        return None
    a, b = a[sil], b[sil]
    with torch.no_grad():
        sa = project_torch(cam, torch.as_tensor(Pd[a]))[0].numpy()
        sb = project_torch(cam, torch.as_tensor(Pd[b]))[0].numpy()
    seg = sb - sa
    length = np.linalg.norm(seg, axis=1)
    keep = length > 1e-12
    if not keep.any():
        return None
    a, b, sa, seg, length = a[keep], b[keep], sa[keep], seg[keep], length[keep]
    total = length.sum()
    cdf = np.cumsum(length) / total
    u = stream_uniforms(seed, stream_id(DOMAIN_PRIMARY_EDGE, 0, 0), 0, n_samples, 2)
    k = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(cdf) - 1)
    t = u[:, 1]
    p = sa[k] + t[:, None] * seg[k]
    nrm = np.stack([-seg[k, 1], seg[k, 0]], axis=1) / length[k, None]
    inside = (p[:, 0] >= 0) & (p[:, 0] < cam.width) & (p[:, 1] >= 0) & (p[:, 1] < cam.height)
    if not inside.any():
        return None
    k, t, p, nrm = k[inside], t[inside], p[inside], nrm[inside]
    m = len(k)
    base = stream_id(DOMAIN_PRIMARY_EDGE, 1, 0)
    cache = {}

    def uniforms(slot):
        if slot not in cache:
            cache[slot] = stream_uniforms(seed, base, slot, n_samples, UNIFORMS_PER_BOUNCE)[inside]
        return cache[slot]

    with torch.no_grad():
        L_minus, _, _ = trace_paths(cs, cam, p - offset * nrm, uniforms, settings)
        L_plus, _, _ = trace_paths(cs, cam, p + offset * nrm, uniforms, settings)
    pix = np.floor(p[:, 1]).astype(np.int64) * cam.width + np.floor(p[:, 0]).astype(np.int64)
    jump = (L_minus - L_plus).numpy()
    w = (adj[pix] * jump).sum(1) * total / n_samples
    act = w != 0
    if not act.any():
        return None
    ia = torch.as_tensor(a[k[act]])
    ib = torch.as_tensor(b[k[act]])
    pa = project_torch(cam, cs.P[ia])[0]
    pb = project_torch(cam, cs.P[ib])[0]
    tt = torch.as_tensor(t[act])[:, None]
    pt = pa + tt * (pb - pa)
    return (torch.as_tensor(w[act] * 1.0) * (torch.as_tensor(nrm[act]) * pt).sum(1)).sum()


def secondary_edge_surrogate(cs: CompiledScene, cam: CameraSpec, settings: RenderSettings, adj: np.ndarray,
                             mesh_ids, n_points: int, seed: int, offset: float) -> torch.Tensor | None:
    """Shadow-edge boundary term for directly lit points on static geometry."""
    if n_points <= 0:
        return None
    u = stream_uniforms(seed, stream_id(DOMAIN_SECONDARY_EDGE, 0, 0), 0, n_points, 8)
    screen = np.stack([u[:, 0] * cam.width, u[:, 1] * cam.height], axis=1)
    d = camera_rays(cam, screen[:, 0], screen[:, 1])
    o = np.broadcast_to(cam.origin, (n_points, 3)).copy()
    _, tri, bu, bv = cs.bvh.intersect(o, d)
    inst_mask = np.zeros(len(cs.instance_ids), bool)
    for mid in mesh_ids:
        inst_mask[cs.instance_ids.index(mid)] = True
    ok = tri >= 0
    ok[ok] = ~inst_mask[cs.face_inst[tri[ok]]]
    ok[ok] = ~cs.transmissive[cs.face_mat[tri[ok]]]
    if not ok.any():
        return None
    sel = np.nonzero(ok)[0]
    Pd = cs.P.detach().numpy()
    a, b, f0, f1 = _edge_tables(cs, mesh_ids)
    centers, normals = _face_geometry(Pd, cs.faces)
    with torch.no_grad():
        hit = differentiable_hit(cs, torch.as_tensor(o[sel]), torch.as_tensor(d[sel]), tri[sel])
        ng = hit.ng.numpy()
        ns = hit.ns.numpy()
        wo = -d[sel]
        flip = np.where((ng * wo).sum(1) < 0, -1.0, 1.0)[:, None]
        ng = ng * flip
        ns = ns * flip
        x = hit.x.numpy()
    side = np.sign(x @ normals.T - (centers * normals).sum(1)[None])
    sil = np.where(f1[None] >= 0, side[:, f0] != side[:, np.maximum(f1, 0)], True)
    n_sil = sil.sum(1)
    has = n_sil > 0
    if not has.any():
        return None
    # pick one silhouette edge per point uniformly
    ur = u[sel, 2]
    pick = np.minimum((ur * n_sil).astype(np.int64), np.maximum(n_sil - 1, 0))
    csum = np.cumsum(sil, axis=1)
    eidx = np.argmax(csum > pick[:, None], axis=1)
    t = u[sel, 3]
    y = Pd[a[eidx]] + t[:, None] * (Pd[b[eidx]] - Pd[a[eidx]])
    rel = y - x
    r = np.linalg.norm(rel, axis=1)
    w_dir = rel / np.maximum(r, 1e-30)[:, None]
    tang = Pd[b[eidx]] - Pd[a[eidx]]
    T = (tang - (tang * w_dir).sum(1, keepdims=True) * w_dir) / np.maximum(r, 1e-30)[:, None]
    tlen = np.linalg.norm(T, axis=1)
    n_w = np.cross(w_dir, T)
    n_w /= np.maximum(np.linalg.norm(n_w, axis=1), 1e-30)[:, None]
    valid = has & ((ng * w_dir).sum(1) > 0) & (tlen > 1e-12)
    if not valid.any():
        return None

    def g(dirs):
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        with torch.no_grad():
            tb = B.frame_from_normal(torch.as_tensor(ns))
            frame = (tb[0], tb[1], torch.as_tensor(ns))
            sp = surface_params(cs, hit.mat, hit.uv)
            if not cs.any_glossy:
                sp.any_glossy = False
            wo_l = B.to_local(torch.as_tensor(wo), *frame)
            wi_l = B.to_local(torch.as_tensor(dirs), *frame)
            f, _ = B.evaluate(sp, wo_l, wi_l)
            val = (f * torch.abs(wi_l[:, 2:3])).numpy()
        up = ((ng * dirs).sum(1) > 0) & ((ns * dirs).sum(1) > 0)
        org = x + cs.eps * ng
        occ = cs.bvh.occluded(org, dirs)
        return val * cs.env.radiance(dirs) * (up & ~occ)[:, None]

    g_minus = g(w_dir - offset * n_w)
    g_plus = g(w_dir + offset * n_w)
    pix = (np.floor(screen[sel, 1]).astype(np.int64) * cam.width + np.floor(screen[sel, 0]).astype(np.int64))
    weight = (cam.width * cam.height / n_points) * (adj[pix] * (g_minus - g_plus)).sum(1) * tlen * n_sil
    weight = np.where(valid, weight, 0.0)
    act = weight != 0
    if not act.any():
        return None
    ia = torch.as_tensor(a[eidx[act]])
    ib = torch.as_tensor(b[eidx[act]])
    yt = cs.P[ia] + torch.as_tensor(t[act])[:, None] * (cs.P[ib] - cs.P[ia])
    rt = yt - torch.as_tensor(x[act])
    wt = rt / rt.norm(dim=1, keepdim=True)
    return (torch.as_tensor(weight[act]) * (torch.as_tensor(n_w[act]) * wt).sum(1)).sum()


@dataclass
class GradResult:
    image: HDRImage
    loss: float
    grads: GradientSet
    images: list
    nan_count: int = 0


def render_with_grad(scene: SceneDescription, params: ParameterSet, camera: CameraSpec,
                     settings: RenderSettings, loss: LossKind, target,
                     boundary: BoundaryConfig = BoundaryConfig(), gradient_dump=None) -> GradResult:
    """Render ``scene`` with ``params`` applied, evaluate ``loss`` and estimate its gradient."""
    params.validate(scene)
    scene = params.apply(scene)
    vert, mats, leaves = _leaves(params)
    cs = compile_scene(scene, vert, mats)
    # route the flattened positions/normals through intermediate leaves so that
    # per-chunk backward passes only accumulate there
    P_full, N_full = cs.P, cs.N
    P_mid = P_full.detach().requires_grad_(P_full.requires_grad)
    N_mid = N_full.detach().requires_grad_(N_full.requires_grad)
    cs.P, cs.N = P_mid, N_mid

    nb = n_buffers(loss)
    seeds = [buffer_seed(settings.seed, k) for k in range(nb)]
    npx = camera.width * camera.height
    imgs, nans = [], 0
    single = settings.spp * npx <= settings.max_batch
    kept = []
    for s in seeds:
        img = torch.zeros((npx, 3), dtype=DTYPE)
        with torch.set_grad_enabled(single):
            for pix, L, _, nanc in iter_image_batches(cs, camera, settings, s):
                img = img.index_add(0, torch.as_tensor(pix), L.detach())
                nans += nanc
                if single:
                    kept.append((pix, L))
        imgs.append((img / settings.spp).reshape(camera.height, camera.width, 3))
    img_vars = [i.clone().requires_grad_(True) for i in imgs]
    loss_t = loss_torch(loss, img_vars, target)
    adj = torch.autograd.grad(loss_t, img_vars, allow_unused=True)
    adj = [torch.zeros_like(i) if a is None else a for a, i in zip(adj, img_vars)]
    adj_flat = [a.reshape(npx, 3) for a in adj]

    for k, s in enumerate(seeds):
        if single:
            pix, L = kept[k]
            sur = (adj_flat[k][torch.as_tensor(pix)] * L).sum() / settings.spp
            if sur.requires_grad:
                sur.backward()
            continue
        for pix, L, _, _ in iter_image_batches(cs, camera, settings, s):
            sur = (adj_flat[k][torch.as_tensor(pix)] * L).sum() / settings.spp
            if sur.requires_grad:
                sur.backward()

    mesh_ids = [e.mesh_id for _, e in params if isinstance(e, VertexPositions)]
    if mesh_ids and boundary.enabled:
        adj_sum = sum(a.detach().numpy() for a in adj_flat)
        ns1 = int(round(boundary.primary_samples_per_pixel * npx))
        ns2 = int(round(boundary.secondary_samples_per_pixel * npx))
        for term in (primary_edge_surrogate(cs, camera, settings, adj_sum, mesh_ids, ns1, settings.seed,
                                            boundary.offset),
                     secondary_edge_surrogate(cs, camera, settings, adj_sum, mesh_ids, ns2, settings.seed,
                                              boundary.offset)):
            if term is not None and term.requires_grad:
                term.backward()

    outs, grads_mid = [], []
    for full, mid in ((P_full, P_mid), (N_full, N_mid)):
        if full.requires_grad and mid.grad is not None:
            outs.append(full)
            grads_mid.append(mid.grad)
    if outs:
        torch.autograd.backward(outs, grads_mid)

    grads = GradientSet()
    for name, t in leaves.items():
        g = np.zeros(t.shape) if t.grad is None else t.grad.numpy().copy()
        if not np.all(np.isfinite(g)):
            raise GradientError(name, {"non_finite": int((~np.isfinite(g)).sum()), "nan_samples": nans,
                                       "spp": settings.spp, "seed": settings.seed})
        grads[name] = g.reshape(params[name].value.shape)
    if gradient_dump is not None:
        grads.dump_csv(gradient_dump)
    hdr = [HDRImage(np.maximum(i.numpy(), 0.0)) for i in imgs]
    return GradResult(hdr[0], float(loss_t.detach()), grads, hdr, nans)


def render_loss(scene: SceneDescription, params: ParameterSet, camera: CameraSpec, settings: RenderSettings,
                loss: LossKind, target) -> float:
    """Forward-only evaluation of the same loss (used for finite differences)."""
    scene = params.apply(scene)
    cs = compile_scene(scene)
    imgs = []
    for k in range(n_buffers(loss)):
        r = render_compiled(cs, camera, settings, buffer_seed(settings.seed, k))
        imgs.append(torch.as_tensor(r.image.data))
    with torch.no_grad():
        return float(loss_torch(loss, imgs, target))
