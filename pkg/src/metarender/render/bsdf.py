"""Lambertian and PrincipledLite scattering in the local shading frame (z = normal).

All functions take batched torch tensors. Directions point away from the
surface. ``evaluate`` returns the BSDF value together with the density of
``sample``; gradients flow through the value only, the density is meant to be
treated as a constant by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

ALPHA_MIN = 1e-3
INV_PI = 1.0 / math.pi


@dataclass
class SurfaceParams:
    """Per-hit material state; every field holds one row per hit."""

    base: torch.Tensor        # (N, 3)
    roughness: torch.Tensor   # (N,)
    metallic: torch.Tensor
    spec_trans: torch.Tensor
    eta: torch.Tensor
    anisotropy: torch.Tensor
    glossy: torch.Tensor      # (N,) bool, False for plain Lambertian
    any_glossy: bool = True

    def subset(self, idx):
        return SurfaceParams(self.base[idx], self.roughness[idx], self.metallic[idx], self.spec_trans[idx],
                             self.eta[idx], self.anisotropy[idx], self.glossy[idx], self.any_glossy)


def frame_from_normal(n: torch.Tensor):
    """Branchless orthonormal basis (t, b) completing the unit normal n."""
    sign = torch.where(n[:, 2] >= 0, 1.0, -1.0).to(n.dtype)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = torch.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], dim=1)
    bb = torch.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], dim=1)
    return t, bb


def to_local(v, t, b, n):
    return torch.stack([(v * t).sum(1), (v * b).sum(1), (v * n).sum(1)], dim=1)


def to_world(v, t, b, n):
    return v[:, 0:1] * t + v[:, 1:2] * b + v[:, 2:3] * n


def alphas(roughness, anisotropy):
    aspect = torch.sqrt(1.0 - 0.9 * anisotropy)
    r2 = roughness * roughness
    ax = torch.clamp(r2 / aspect, min=ALPHA_MIN)
    ay = torch.clamp(r2 * aspect, min=ALPHA_MIN)
    return ax, ay


def ggx_d(h, ax, ay):
    e = (h[:, 0] / ax) ** 2 + (h[:, 1] / ay) ** 2 + h[:, 2] ** 2
    return 1.0 / (math.pi * ax * ay * e * e)


def ggx_lambda(w, ax, ay):
    z2 = torch.clamp(w[:, 2] ** 2, min=1e-20)
    a2 = ((ax * w[:, 0]) ** 2 + (ay * w[:, 1]) ** 2) / z2
    return 0.5 * (torch.sqrt(1.0 + a2) - 1.0)


def sample_vndf(wo, ax, ay, u1, u2):
    """Visible-normal sampling for wo in the upper hemisphere."""
    vh = torch.stack([ax * wo[:, 0], ay * wo[:, 1], wo[:, 2]], dim=1)
    vh = vh / vh.norm(dim=1, keepdim=True)
    lensq = vh[:, 0] ** 2 + vh[:, 1] ** 2
    safe = torch.sqrt(torch.clamp(lensq, min=1e-30))
    t1 = torch.where((lensq > 0)[:, None],
                     torch.stack([-vh[:, 1] / safe, vh[:, 0] / safe, torch.zeros_like(safe)], dim=1),
                     torch.tensor([1.0, 0.0, 0.0], dtype=wo.dtype).expand_as(vh))
    t2 = torch.cross(vh, t1, dim=1)
    r = torch.sqrt(u1)
    phi = 2.0 * math.pi * u2
    p1 = r * torch.cos(phi)
    p2 = r * torch.sin(phi)
    s = 0.5 * (1.0 + vh[:, 2])
    p2 = (1.0 - s) * torch.sqrt(torch.clamp(1.0 - p1 * p1, min=0.0)) + s * p2
    nh = (p1[:, None] * t1 + p2[:, None] * t2
          + torch.sqrt(torch.clamp(1.0 - p1 * p1 - p2 * p2, min=0.0))[:, None] * vh)
    ne = torch.stack([ax * nh[:, 0], ay * nh[:, 1], torch.clamp(nh[:, 2], min=1e-6)], dim=1)
    return ne / ne.norm(dim=1, keepdim=True)


def fresnel_dielectric(cos_i, eta):
    """Unpolarised Fresnel reflectance; cos_i > 0 on the incident side, eta = n_t / n_i."""
    sin2_t = (1.0 - cos_i * cos_i) / (eta * eta)
    cos_t = torch.sqrt(torch.clamp(1.0 - sin2_t, min=0.0))
    r_par = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    r_perp = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    f = 0.5 * (r_par * r_par + r_perp * r_perp)
    return torch.where(sin2_t >= 1.0, torch.ones_like(f), f)


def cosine_hemisphere(u1, u2):
    r = torch.sqrt(u1)
    phi = 2.0 * math.pi * u2
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), torch.sqrt(torch.clamp(1.0 - u1, min=0.0))], dim=1)


def lobe_weights(p: SurfaceParams, outside: torch.Tensor):
    """Mixture weights (diffuse, specular, dielectric) and their sampling probabilities."""
    m, st = p.metallic, p.spec_trans
    g = p.glossy.to(m.dtype)
    out = outside.to(m.dtype)
    w_d = torch.where(p.glossy, (1.0 - m) * (1.0 - st), torch.ones_like(m)) * out
    w_s = g * (1.0 - (1.0 - m) * st) * out
    # below the surface only the dielectric interface remains
    w_t = g * torch.where(outside, (1.0 - m) * st, torch.ones_like(m))
    with torch.no_grad():
        tot = w_d + w_s + w_t
        tot = torch.where(tot > 0, tot, torch.ones_like(tot))
        probs = torch.stack([w_d, w_s, w_t], dim=1).detach() / tot.detach()[:, None]
    return w_d, w_s, w_t, probs


def _schlick_f0(p: SurfaceParams):
    r0 = ((p.eta - 1.0) / (p.eta + 1.0)) ** 2
    return r0[:, None] * (1.0 - p.metallic[:, None]) + p.base * p.metallic[:, None]


def evaluate(p: SurfaceParams, wo, wi):
    """Return (f (N, 3), pdf (N,)) for local directions wo, wi."""
    co = wo[:, 2]
    ci = wi[:, 2]
    outside = co > 0
    w_d, w_s, w_t, probs = lobe_weights(p, outside)
    both_up = outside & (ci > 0)
    cz = torch.zeros_like(co)
    if p.any_glossy:
        # the coat's Fresnel share is taken from the diffuse base on both sides (keeps reciprocity)
        r0 = ((p.eta - 1.0) / (p.eta + 1.0)) ** 2
        coat = ((1.0 - r0) * (1.0 - torch.clamp(1.0 - co.abs(), 0.0, 1.0) ** 5)
                * (1.0 - r0) * (1.0 - torch.clamp(1.0 - ci.abs(), 0.0, 1.0) ** 5))
        w_d = torch.where(p.glossy, w_d * coat, w_d)
    f = p.base * (w_d * INV_PI * both_up)[:, None]
    pdf_d = torch.where(both_up, ci * INV_PI, cz)
    pdf = probs[:, 0] * pdf_d.detach()
    if not p.any_glossy:
        return f, pdf
    ax, ay = alphas(p.roughness, p.anisotropy)

    # conductor / dielectric-coated specular reflection above the surface
    cos_o = torch.clamp(co, min=1e-12)
    cos_i = torch.clamp(ci, min=1e-12)
    h = wo + wi
    h = h / torch.clamp(h.norm(dim=1, keepdim=True), min=1e-20)
    lo = ggx_lambda(wo, ax, ay)
    li = ggx_lambda(wi, ax, ay)
    d = ggx_d(h, ax, ay)
    g2 = 1.0 / (1.0 + lo + li)
    g1o = 1.0 / (1.0 + lo)
    oh = (wo * h).sum(1)
    f0 = _schlick_f0(p)
    fs = f0 + (1.0 - f0) * torch.clamp(1.0 - oh, min=0.0)[:, None] ** 5
    spec_ok = both_up & p.glossy
    spec = fs * (d * g2 / (4.0 * cos_o * cos_i) * w_s)[:, None]
    f = f + torch.where(spec_ok[:, None], spec, torch.zeros_like(spec))
    pdf_s = torch.where(spec_ok, g1o * d / (4.0 * cos_o), cz)
    pdf = pdf + probs[:, 1] * pdf_s.detach()

    # rough dielectric in a frame flipped so that wo is on the +z side
    flip = torch.where(outside, 1.0, -1.0).to(co.dtype)
    wo_f = wo * torch.stack([torch.ones_like(flip), torch.ones_like(flip), flip], dim=1)
    wi_f = wi * torch.stack([torch.ones_like(flip), torch.ones_like(flip), flip], dim=1)
    eta_r = torch.where(outside, p.eta, 1.0 / p.eta)
    tint = torch.where(outside[:, None], p.base, torch.ones_like(p.base))
    co_f = torch.clamp(wo_f[:, 2], min=1e-12)
    ci_f = wi_f[:, 2]
    lo_f = ggx_lambda(wo_f, ax, ay)
    li_f = ggx_lambda(wi_f, ax, ay)
    g2_f = 1.0 / (1.0 + lo_f + li_f)
    g1_f = 1.0 / (1.0 + lo_f)
    active = p.glossy & (co != 0)
    # reflection
    refl = active & (ci_f > 0)
    hr = wo_f + wi_f
    hr = hr / torch.clamp(hr.norm(dim=1, keepdim=True), min=1e-20)
    ohr = torch.clamp((wo_f * hr).sum(1), min=1e-12)
    fr = fresnel_dielectric(ohr, eta_r)
    dr = ggx_d(hr, ax, ay)
    val_r = fr * dr * g2_f / (4.0 * co_f * torch.clamp(ci_f, min=1e-12)) * w_t
    pdf_r = fr * g1_f * dr / (4.0 * co_f)
    # transmission
    ht = wo_f + eta_r[:, None] * wi_f
    ht = ht / torch.clamp(ht.norm(dim=1, keepdim=True), min=1e-20)
    ht = ht * torch.where(ht[:, 2] < 0, -1.0, 1.0).to(co.dtype)[:, None]
    oht = (wo_f * ht).sum(1)
    iht = (wi_f * ht).sum(1)
    trans = active & (ci_f < 0) & (oht > 0) & (iht < 0)
    denom = (oht + eta_r * iht) ** 2
    denom = torch.clamp(denom, min=1e-20)
    ft = fresnel_dielectric(torch.clamp(oht, min=1e-12), eta_r)
    dt = ggx_d(ht, ax, ay)
    val_t = (1.0 - ft) * dt * g2_f * torch.abs(iht) * oht / (torch.clamp(torch.abs(ci_f), min=1e-12) * co_f * denom) * w_t
    pdf_t = (1.0 - ft) * g1_f * dt * oht / co_f * eta_r ** 2 * torch.abs(iht) / denom
    diel = (torch.where(refl, val_r, cz)[:, None] * torch.ones_like(tint)
            + torch.where(trans, val_t, cz)[:, None] * tint)
    f = f + diel
    pdf_dl = torch.where(refl, pdf_r, cz) + torch.where(trans, pdf_t, cz)
    pdf = pdf + probs[:, 2] * pdf_dl.detach()
    return f, pdf


@torch.no_grad()
def sample(p: SurfaceParams, wo, u):
    """Sample an incident local direction; ``u`` is (N, 3) uniforms. Returns (wi, valid)."""
    outside = wo[:, 2] > 0
    _, _, _, probs = lobe_weights(p, outside)
    c0 = probs[:, 0]
    c1 = c0 + probs[:, 1]
    lobe = torch.where(u[:, 0] < c0, 0, torch.where(u[:, 0] < c1, 1, 2))
    wi = cosine_hemisphere(u[:, 1], u[:, 2])
    if not p.any_glossy:
        return wi, outside
    ax, ay = alphas(p.roughness, p.anisotropy)
    # remap the lobe uniform so it can drive the reflect/refract choice
    lo = torch.where(lobe == 0, 0.0, torch.where(lobe == 1, c0, c1)).to(u.dtype)
    pl = torch.gather(probs, 1, lobe[:, None])[:, 0]
    u_sub = torch.clamp((u[:, 0] - lo) / torch.clamp(pl, min=1e-20), 0.0, 1.0 - 1e-12)

    flip = torch.where(outside, 1.0, -1.0).to(wo.dtype)
    fz = torch.stack([torch.ones_like(flip), torch.ones_like(flip), flip], dim=1)
    wo_f = wo * fz
    h = sample_vndf(wo_f, ax, ay, u[:, 1], u[:, 2])
    oh = (wo_f * h).sum(1)
    refl_dir = 2.0 * oh[:, None] * h - wo_f
    eta_r = torch.where(outside, p.eta, 1.0 / p.eta)
    sin2_t = (1.0 - oh * oh) / (eta_r * eta_r)
    cos_t = torch.sqrt(torch.clamp(1.0 - sin2_t, min=0.0))
    refr_dir = -wo_f / eta_r[:, None] + (oh / eta_r - cos_t)[:, None] * h
    fr = fresnel_dielectric(torch.clamp(oh, min=1e-12), eta_r)
    reflect = u_sub < fr
    diel_dir = torch.where(reflect[:, None], refl_dir, refr_dir) * fz
    spec_dir = refl_dir * fz
    wi = torch.where((lobe == 0)[:, None], wi, torch.where((lobe == 1)[:, None], spec_dir, diel_dir))
    wi = wi / wi.norm(dim=1, keepdim=True)
    # microfacet reflections that end up below the surface are discarded
    up = refl_dir[:, 2] > 0
    valid = torch.where(lobe == 0, outside,
                        torch.where(lobe == 1, outside & up, ~reflect | up))
    return wi, valid
