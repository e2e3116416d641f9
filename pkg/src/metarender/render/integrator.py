"""Unidirectional path tracer with environment next-event estimation and MIS.

Geometry queries run on a numba BVH over detached positions; all shading is
written in torch so the same code path produces plain images (under
``torch.no_grad``) and differentiable per-path contributions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..scene import (Checkerboard, ConstantRGB, Diffuse, PrincipledLite, SceneDescription, Texture,
                     CameraSpec)
from . import bsdf as B
from .bvh import BVH
from .image import HDRImage
from .sampling import (CAMERA_SLOT, DOMAIN_IMAGE, UNIFORMS_PER_BOUNCE, EnvSampler, stream_id,
                       stream_uniforms)

DTYPE = torch.float64
NORMAL_BEND = 0.1
MATERIAL_FIELDS = ("roughness", "metallic", "spec_trans", "eta", "anisotropy")


@dataclass(frozen=True)
class RenderSettings:
    spp: int = 32
    max_depth: int = 8
    rr_depth: int = 5
    seed: int = 0
    tile_size: int = 16
    rr_survival: float = 0.9
    max_batch: int = 1 << 16

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.rr_depth < 1:
            raise ValueError("rr_depth must be >= 1")
        if not 0.0 < self.rr_survival <= 1.0:
            raise ValueError("rr_survival must lie in (0, 1]")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class RenderResult:
    image: HDRImage
    coverage: np.ndarray      # (H, W) fraction of primary samples that hit geometry
    nan_count: int = 0


def _as_t(x, dtype=DTYPE):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def vertex_normals_torch(P: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Area-weighted vertex normals, differentiable in P."""
    p0, p1, p2 = P[faces[:, 0]], P[faces[:, 1]], P[faces[:, 2]]
    fn = torch.cross(p1 - p0, p2 - p0, dim=1)
    vn = torch.zeros_like(P)
    for k in range(3):
        vn = vn.index_add(0, faces[:, k], fn)
    return vn / torch.clamp(vn.norm(dim=1, keepdim=True), min=1e-30)


def _face_uvs(mesh) -> np.ndarray:
    if mesh.uvs is None:
        return np.zeros((mesh.n_faces, 3, 2))
    fu = mesh.uvs[mesh.faces].copy()
    # faces that straddle the u seam get their small-u corners shifted by one
    u = fu[:, :, 0]
    wrap = (u.max(axis=1) - u.min(axis=1)) > 0.5
    fu[:, :, 0] = np.where(wrap[:, None] & (u < 0.5), u + 1.0, u)
    return fu


class MaterialSlot:
    """Torch view of one material; fields may be replaced by differentiable tensors."""

    def __init__(self, mat, overrides: dict):
        self.glossy = isinstance(mat, PrincipledLite)
        albedo = mat.base_color if self.glossy else mat.albedo
        self.albedo_kind = type(albedo).__name__
        if isinstance(albedo, ConstantRGB):
            self.rgb = _as_t(overrides.get("base_color", albedo.rgb))
        elif isinstance(albedo, Checkerboard):
            self.color_a = _as_t(albedo.color_a)
            self.color_b = _as_t(albedo.color_b)
            self.scale = float(albedo.scale)
        elif isinstance(albedo, Texture):
            self.texels = _as_t(overrides.get("texels", albedo.texels))
        else:
            raise TypeError(f"unsupported albedo {type(albedo).__name__}")
        defaults = {"roughness": 1.0, "metallic": 0.0, "spec_trans": 0.0, "eta": 1.5, "anisotropy": 0.0}
        for name in MATERIAL_FIELDS:
            val = getattr(mat, name) if self.glossy else defaults[name]
            setattr(self, name, _as_t(overrides.get(name, val)).reshape(()))
        self.transmissive = self.glossy and float(self.spec_trans.detach()) > 0.0

    def albedo(self, uv: torch.Tensor) -> torch.Tensor:
        n = uv.shape[0]
        if self.albedo_kind == "ConstantRGB":
            return self.rgb.reshape(1, 3).expand(n, 3)
        if self.albedo_kind == "Checkerboard":
            with torch.no_grad():
                par = (torch.floor(uv[:, 0] * self.scale) + torch.floor(uv[:, 1] * self.scale)) % 2 == 0
            return torch.where(par[:, None], self.color_a, self.color_b)
        return bilinear_lookup(self.texels, uv)


def bilinear_lookup(tex: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear texture fetch with wrap addressing; row 0 sits at v = 0."""
    h, w = tex.shape[0], tex.shape[1]
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    xi0 = x0.long() % w
    yi0 = y0.long() % h
    xi1 = (xi0 + 1) % w
    yi1 = (yi0 + 1) % h
    return ((1 - fx) * (1 - fy) * tex[yi0, xi0] + fx * (1 - fy) * tex[yi0, xi1]
            + (1 - fx) * fy * tex[yi1, xi0] + fx * fy * tex[yi1, xi1])


@dataclass
class CompiledScene:
    """Flattened triangle soup plus torch shading data for one render call."""

    P: torch.Tensor                 # (V, 3) positions, possibly differentiable
    N: torch.Tensor                 # (V, 3) shading normals
    faces: np.ndarray
    faces_t: torch.Tensor
    face_mat: np.ndarray
    face_inst: np.ndarray
    face_uv: torch.Tensor
    materials: list
    env: EnvSampler
    bvh: BVH
    instance_ids: list
    instance_ranges: dict           # id -> (vertex offset, vertex count, face offset, face count)
    eps: float
    any_glossy: bool = False
    transmissive: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def compile_scene(scene: SceneDescription, vertex_overrides: dict | None = None,
                  material_overrides: dict | None = None) -> CompiledScene:
    """Flatten ``scene``; overrides map mesh id -> (V, 3) tensor and material id -> {field: tensor}."""
    vertex_overrides = vertex_overrides or {}
    material_overrides = material_overrides or {}
    mats = scene.all_materials()
    mat_ids = list(mats)
    slots = [MaterialSlot(mats[m], material_overrides.get(m, {})) for m in mat_ids]
    Ps, Ns, faces, fmat, finst, fuv = [], [], [], [], [], []
    ranges = {}
    inst_ids = []
    voff = foff = 0
    for k, (iid, mesh, mid) in enumerate(scene.all_instances()):
        if iid in vertex_overrides:
            P = vertex_overrides[iid]
            N = vertex_normals_torch(P, torch.as_tensor(mesh.faces))
        else:
            P = _as_t(mesh.vertices)
            N = _as_t(mesh.normals)
        Ps.append(P)
        Ns.append(N)
        faces.append(mesh.faces + voff)
        fmat.append(np.full(mesh.n_faces, mat_ids.index(mid)))
        finst.append(np.full(mesh.n_faces, k))
        fuv.append(_face_uvs(mesh))
        ranges[iid] = (voff, mesh.n_vertices, foff, mesh.n_faces)
        inst_ids.append(iid)
        voff += mesh.n_vertices
        foff += mesh.n_faces
    if Ps:
        P = torch.cat(Ps)
        N = torch.cat(Ns)
        F = np.concatenate(faces)
        fm = np.concatenate(fmat)
        fi = np.concatenate(finst)
        fu = np.concatenate(fuv)
    else:
        P = torch.zeros((0, 3), dtype=DTYPE)
        N = torch.zeros((0, 3), dtype=DTYPE)
        F = np.zeros((0, 3), np.int64)
        fm = np.zeros(0, np.int64)
        fi = np.zeros(0, np.int64)
        fu = np.zeros((0, 3, 2))
    Pd = P.detach().numpy()
    scale = max(1.0, float(np.abs(Pd).max())) if len(Pd) else 1.0
    return CompiledScene(P, N, F, torch.as_tensor(F), fm, fi, torch.as_tensor(fu), slots,
                         EnvSampler(scene.environment), BVH(Pd, F), inst_ids, ranges, 1e-4 * scale,
                         any(s.glossy for s in slots), np.array([s.transmissive for s in slots], bool))


# ---------------------------------------------------------------------------
# Camera


def camera_rays(cam: CameraSpec, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """World directions through continuous pixel coordinates (x right, y down)."""
    right, up, fwd = cam.frame()
    tan_h = math.tan(math.radians(cam.fov) / 2.0)
    aspect = cam.width / cam.height
    px = (2.0 * sx / cam.width - 1.0) * tan_h * aspect
    py = (1.0 - 2.0 * sy / cam.height) * tan_h
    d = fwd[None] + px[:, None] * right[None] + py[:, None] * up[None]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def project_torch(cam: CameraSpec, X: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel coordinates of world points and their camera depth."""
    right, up, fwd = (torch.as_tensor(v) for v in cam.frame())
    rel = X - torch.as_tensor(cam.origin)
    z = rel @ fwd
    tan_h = math.tan(math.radians(cam.fov) / 2.0)
    aspect = cam.width / cam.height
    px = (rel @ right) / (z * tan_h * aspect)
    py = (rel @ up) / (z * tan_h)
    sx = (px + 1.0) * 0.5 * cam.width
    sy = (1.0 - py) * 0.5 * cam.height
    return torch.stack([sx, sy], dim=1), z


# ---------------------------------------------------------------------------
# Path tracing


@dataclass
class HitInfo:
    x: torch.Tensor
    ng: torch.Tensor
    ns: torch.Tensor
    uv: torch.Tensor
    mat: np.ndarray
    tri: np.ndarray


def differentiable_hit(cs: CompiledScene, o: torch.Tensor, d: torch.Tensor, tri: np.ndarray) -> HitInfo:
    """Re-intersect known triangles along fixed rays so the hit point follows the vertices."""
    ft = cs.faces_t[torch.as_tensor(tri)]
    p0, p1, p2 = cs.P[ft[:, 0]], cs.P[ft[:, 1]], cs.P[ft[:, 2]]
    e1 = p1 - p0
    e2 = p2 - p0
    pv = torch.cross(d, e2, dim=1)
    inv = 1.0 / (e1 * pv).sum(1)
    s = o - p0
    b1 = (s * pv).sum(1) * inv
    q = torch.cross(s, e1, dim=1)
    b2 = (d * q).sum(1) * inv
    t = (e2 * q).sum(1) * inv
    x = o + t[:, None] * d
    b0 = 1.0 - b1 - b2
    ng = torch.cross(e1, e2, dim=1)
    ng = ng / torch.clamp(ng.norm(dim=1, keepdim=True), min=1e-30)
    ns = b0[:, None] * cs.N[ft[:, 0]] + b1[:, None] * cs.N[ft[:, 1]] + b2[:, None] * cs.N[ft[:, 2]]
    ns = ns / torch.clamp(ns.norm(dim=1, keepdim=True), min=1e-30)
    fuv = cs.face_uv[torch.as_tensor(tri)]
    uv = b0[:, None] * fuv[:, 0] + b1[:, None] * fuv[:, 1] + b2[:, None] * fuv[:, 2]
    return HitInfo(x, ng, ns, uv, cs.face_mat[tri], tri)


def surface_params(cs: CompiledScene, mat: np.ndarray, uv: torch.Tensor) -> B.SurfaceParams:
    n = len(mat)
    mat_t = torch.as_tensor(mat)
    base = torch.zeros((n, 3), dtype=DTYPE)
    for k in np.unique(mat):
        idx = torch.as_tensor(np.nonzero(mat == k)[0])
        base = base.index_put((idx,), cs.materials[k].albedo(uv[idx]))
    scal = {}
    for name in MATERIAL_FIELDS:
        scal[name] = torch.stack([getattr(s, name) for s in cs.materials])[mat_t]
    glossy = torch.as_tensor(np.array([s.glossy for s in cs.materials], bool)[mat])
    return B.SurfaceParams(base, scal["roughness"], scal["metallic"], scal["spec_trans"], scal["eta"],
                           scal["anisotropy"], glossy, bool(glossy.any()))


def _dot(a, b):
    return (a * b).sum(1)


def shade_direct(hit, frame, sp, wo_l, wi_world: np.ndarray, opaque: np.ndarray):
    """Return (f * |cos| (N, 3) tensor, bsdf pdf (N,), geometric validity mask) for given light directions."""
    wi_t = torch.as_tensor(wi_world)
    t, b, n = frame
    wi_l = B.to_local(wi_t, t, b, n)
    f, pdf_b = B.evaluate(sp, wo_l, wi_l)
    with torch.no_grad():
        cg = _dot(hit.ng, wi_t)
        cs_ = wi_l[:, 2]
        ok = ((cg * cs_) > 0) & torch.as_tensor(~opaque | (cg.numpy() > 0))
    return f * torch.abs(wi_l[:, 2:3]), pdf_b, ok.numpy()


def trace_paths(cs: CompiledScene, cam: CameraSpec, screen: np.ndarray, uniforms, settings: RenderSettings):
    """Trace one path per screen position.

    ``uniforms(slot)`` returns an (n, k) array of random numbers for the
    given bounce slot (``CAMERA_SLOT`` is not used here; ``screen`` already
    carries the jitter). Returns (radiance (n, 3) tensor, primary-hit mask, nan count).
    """
    n = len(screen)
    o = torch.as_tensor(np.broadcast_to(cam.origin, (n, 3)).copy())
    d = camera_rays(cam, screen[:, 0], screen[:, 1])
    beta = torch.ones((n, 3), dtype=DTYPE)
    L = torch.zeros((n, 3), dtype=DTYPE)
    ids = np.arange(n)
    prev_pdf = None
    primary_hit = np.zeros(n, bool)
    for bounce in range(settings.max_depth + 1):
        if len(ids) == 0:
            break
        u = uniforms(bounce)[ids]
        t_hit, tri, _, _ = cs.bvh.intersect(o.detach().numpy(), d)
        miss = tri < 0
        if bounce == 0:
            primary_hit[ids] = ~miss
        if miss.any():
            dm = d[miss]
            Le = cs.env.radiance(dm)
            if prev_pdf is None:
                w = np.ones(len(dm))
            else:
                pb = prev_pdf[miss]
                pl = cs.env.pdf(dm)
                w = pb / (pb + pl)
            mi = torch.as_tensor(np.nonzero(miss)[0])
            L = L.index_add(0, torch.as_tensor(ids[miss]), beta[mi] * torch.as_tensor(Le * w[:, None]))
        if bounce == settings.max_depth or not (~miss).any():
            break
        h = np.nonzero(~miss)[0]
        ht = torch.as_tensor(h)
        ids_h = ids[h]
        u = u[h]
        d_h = torch.as_tensor(d[h])
        hit = differentiable_hit(cs, o[ht], d_h, tri[h])
        beta_h = beta[ht]
        opaque = ~cs.transmissive[hit.mat]
        wo = -d_h
        with torch.no_grad():
            back = (_dot(hit.ng, wo) < 0).numpy() & opaque
        sgn = torch.as_tensor(np.where(back, -1.0, 1.0))[:, None]
        ng = hit.ng * sgn
        ns = hit.ns * sgn
        # bend the shading normal towards the viewer where interpolation tilts it
        # away; keeps radiance continuous up to the silhouette
        ns = ns + torch.where(torch.as_tensor(opaque)[:, None],
                              torch.clamp(NORMAL_BEND - _dot(ns, wo), min=0.0)[:, None], 0.0) * wo
        ns = ns / ns.norm(dim=1, keepdim=True)
        hit.ng = ng
        hit.ns = ns
        tb = B.frame_from_normal(ns)
        frame = (tb[0], tb[1], ns)
        wo_l = B.to_local(wo, *frame)
        with torch.no_grad():
            wo_ok = ((_dot(ng, wo) * wo_l[:, 2]) > 0).numpy()
        sp = surface_params(cs, hit.mat, hit.uv)
        if not cs.any_glossy:
            sp.any_glossy = False

        # next-event estimation towards the environment
        dl, pdf_l, Le_l = cs.env.sample(u[:, 0], u[:, 1])
        fcos, pdf_b, ok = shade_direct(hit, frame, sp, wo_l, dl, opaque)
        with torch.no_grad():
            side = np.sign(_dot(ng, torch.as_tensor(dl)).numpy())
            org = (hit.x + cs.eps * ng * torch.as_tensor(side)[:, None]).numpy()
        cand = ok & wo_ok & (pdf_l > 0)
        vis = np.zeros(len(h), bool)
        if cand.any():
            vis[cand] = ~cs.bvh.occluded(org[cand], dl[cand])
        pb = pdf_b.detach().numpy()
        w_l = np.where(vis, pdf_l / np.maximum(pdf_l + pb, 1e-300), 0.0)
        scale = np.where(vis, w_l / np.maximum(pdf_l, 1e-300), 0.0)
        contrib = beta_h * fcos * torch.as_tensor(Le_l * scale[:, None])
        L = L.index_add(0, torch.as_tensor(ids_h), contrib)

        # continue the path by sampling the BSDF
        wi_l0, valid = B.sample(sp, wo_l.detach(), torch.as_tensor(u[:, 2:5]))
        with torch.no_grad():
            wi_w = B.to_world(wi_l0, *frame).detach()
            wi_w = wi_w / wi_w.norm(dim=1, keepdim=True)
        wi_np = wi_w.numpy()
        fcos2, pdf2, ok2 = shade_direct(hit, frame, sp, wo_l, wi_np, opaque)
        p2 = pdf2.detach().numpy()
        alive = valid.numpy() & ok2 & wo_ok & (p2 > 0)
        if bounce + 1 >= settings.rr_depth:
            q = settings.rr_survival
            alive &= u[:, 5] < q
            rr = 1.0 / q
        else:
            rr = 1.0
        at = torch.as_tensor(np.nonzero(alive)[0])
        if len(at) == 0:
            ids = ids[:0]
            break
        beta = beta_h[at] * fcos2[at] * torch.as_tensor(rr / p2[alive])[:, None]
        side2 = torch.as_tensor(np.sign((ng[at].detach() * wi_w[at]).sum(1).numpy()))
        o = hit.x[at] + cs.eps * ng[at] * side2[:, None]
        d = wi_np[alive]
        prev_pdf = p2[alive]
        ids = ids_h[alive]
    bad = ~torch.isfinite(L).all(dim=1)
    nan_count = int(bad.sum())
    if nan_count:
        L = torch.where(bad[:, None], torch.zeros_like(L), L)
    return L, primary_hit, nan_count


# ---------------------------------------------------------------------------
# Image-level sample plan


@dataclass
class Stream:
    sid: int
    pixels: np.ndarray    # flat pixel index per path


def image_streams(width: int, height: int, spp: int, tile: int, domain: int = DOMAIN_IMAGE,
                  block: int = 64) -> list[Stream]:
    """Paths grouped by (tile, sample block); each group owns one random stream."""
    streams = []
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            ys = np.arange(ty * tile, min((ty + 1) * tile, height))
            xs = np.arange(tx * tile, min((tx + 1) * tile, width))
            pix = (ys[:, None] * width + xs[None, :]).ravel()
            for bi, s0 in enumerate(range(0, spp, block)):
                ns = min(block, spp - s0)
                streams.append(Stream(stream_id(domain, ty * tiles_x + tx, bi), np.repeat(pix, ns)))
    return streams


def batch_streams(streams: list[Stream], max_batch: int) -> list[list[Stream]]:
    batches, cur, size = [], [], 0
    for s in streams:
        if cur and size + len(s.pixels) > max_batch:
            batches.append(cur)
            cur, size = [], 0
        cur.append(s)
        size += len(s.pixels)
    if cur:
        batches.append(cur)
    return batches


def trace_batch(cs, cam, settings, batch: list[Stream], seed: int):
    """Trace a batch of streams; returns (pixel indices, radiance tensor, primary-hit mask, nan count)."""
    pix = np.concatenate([s.pixels for s in batch])
    jit = np.concatenate([stream_uniforms(seed, s.sid, CAMERA_SLOT, len(s.pixels), 2) for s in batch])
    w = cam.width
    screen = np.stack([pix % w + jit[:, 0], pix // w + jit[:, 1]], axis=1).astype(np.float64)
    cache = {}

    def uniforms(slot):
        if slot not in cache:
            cache[slot] = np.concatenate([stream_uniforms(seed, s.sid, slot, len(s.pixels), UNIFORMS_PER_BOUNCE)
                                          for s in batch])
        return cache[slot]

    L, hit, nans = trace_paths(cs, cam, screen, uniforms, settings)
    return pix, L, hit, nans


def iter_image_batches(cs, cam, settings: RenderSettings, seed: int | None = None, domain: int = DOMAIN_IMAGE):
    seed = settings.seed if seed is None else seed
    streams = image_streams(cam.width, cam.height, settings.spp, settings.tile_size, domain)
    for batch in batch_streams(streams, settings.max_batch):
        yield trace_batch(cs, cam, settings, batch, seed)


def render_compiled(cs: CompiledScene, cam: CameraSpec, settings: RenderSettings, seed: int | None = None,
                    domain: int = DOMAIN_IMAGE) -> RenderResult:
    npx = cam.width * cam.height
    img = torch.zeros((npx, 3), dtype=DTYPE)
    cov = np.zeros(npx)
    nans = 0
    with torch.no_grad():
        for pix, L, hit, nan_count in iter_image_batches(cs, cam, settings, seed, domain):
            img.index_add_(0, torch.as_tensor(pix), L)
            np.add.at(cov, pix, hit)
            nans += nan_count
    img = (img / settings.spp).numpy().reshape(cam.height, cam.width, 3)
    return RenderResult(HDRImage(np.maximum(img, 0.0)), (cov / settings.spp).reshape(cam.height, cam.width), nans)


def render_full(scene: SceneDescription, camera: CameraSpec, settings: RenderSettings) -> RenderResult:
    return render_compiled(compile_scene(scene), camera, settings)


def render(scene: SceneDescription, camera: CameraSpec, settings: RenderSettings) -> HDRImage:
    """Monte Carlo estimate of the image seen by ``camera``; deterministic for a fixed seed."""
    return render_full(scene, camera, settings).image
