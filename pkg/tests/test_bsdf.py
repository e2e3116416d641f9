import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from metarender.render import bsdf as B

N = 200_000


def surface(n, base=(0.8, 0.8, 0.8), roughness=0.5, metallic=0.0, spec_trans=0.0, eta=1.5, anisotropy=0.0,
            glossy=True):
    full = lambda v: torch.full((n,), float(v), dtype=torch.float64)
    return B.SurfaceParams(torch.tensor(base, dtype=torch.float64).expand(n, 3).clone(), full(roughness),
                           full(metallic), full(spec_trans), full(eta), full(anisotropy),
                           torch.full((n,), glossy), glossy)


def uniform_sphere(n, gen):
    u = torch.rand((n, 2), generator=gen, dtype=torch.float64)
    z = 1 - 2 * u[:, 0]
    r = torch.sqrt(torch.clamp(1 - z * z, min=0))
    phi = 2 * math.pi * u[:, 1]
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], 1)


def fixed_wo(n, theta):
    return torch.tensor([math.sin(theta), 0.0, math.cos(theta)], dtype=torch.float64).expand(n, 3).clone()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(7)


def test_lambert_albedo_integral(gen):
    # uniform-sphere quadrature of f cos against the analytic albedo
    p = surface(N, base=(0.2, 0.5, 0.9), glossy=False)
    wi = uniform_sphere(N, gen)
    f, _ = B.evaluate(p, fixed_wo(N, 0.4), wi)
    est = (f * torch.clamp(wi[:, 2:], min=0)).mean(0) * 4 * math.pi
    np.testing.assert_allclose(est.numpy(), [0.2, 0.5, 0.9], rtol=0.01)


def test_ggx_distribution_normalized(gen):
    for ax, ay in [(0.1, 0.1), (0.5, 0.5), (0.3, 0.8)]:
        h = uniform_sphere(N, gen)
        h = h[h[:, 2] > 0]
        d = B.ggx_d(h, torch.tensor(ax, dtype=torch.float64), torch.tensor(ay, dtype=torch.float64))
        est = float((d * h[:, 2]).mean() * 2 * math.pi)
        assert est == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("eta", [1.2, 1.5, 2.4])
def test_fresnel_normal_incidence(eta):
    f = B.fresnel_dielectric(torch.tensor([1.0], dtype=torch.float64), torch.tensor([eta], dtype=torch.float64))
    assert float(f) == pytest.approx(((eta - 1) / (eta + 1)) ** 2, rel=1e-12)


def test_fresnel_total_internal_reflection():
    eta = torch.tensor([1 / 1.5], dtype=torch.float64)
    cos_crit = math.sqrt(1 - (1 / 1.5) ** 2)
    assert float(B.fresnel_dielectric(torch.tensor([cos_crit * 0.99], dtype=torch.float64), eta)) == 1.0
    assert float(B.fresnel_dielectric(torch.tensor([cos_crit * 1.01], dtype=torch.float64), eta)) < 1.0


@given(st.floats(-1, 1), st.floats(0, 2 * math.pi))
def test_frame_is_orthonormal(z, phi):
    r = math.sqrt(max(0.0, 1 - z * z))
    n = torch.tensor([[r * math.cos(phi), r * math.sin(phi), z]], dtype=torch.float64)
    t, b = B.frame_from_normal(n)
    M = torch.cat([t, b, n]).numpy()
    np.testing.assert_allclose(M @ M.T, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(np.cross(M[0], M[1]), M[2], atol=1e-9)


@given(st.floats(0.05, 1.0), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_reflection_reciprocity(rough, metallic, aniso):
    g = torch.Generator().manual_seed(3)
    n = 64
    a = uniform_sphere(n, g).abs()
    b = uniform_sphere(n, g).abs()
    p = surface(n, roughness=rough, metallic=metallic, anisotropy=aniso)
    fab, _ = B.evaluate(p, a, b)
    fba, _ = B.evaluate(p, b, a)
    np.testing.assert_allclose(fab.numpy(), fba.numpy(), rtol=1e-9, atol=1e-12)


CASES = [dict(glossy=False), dict(roughness=0.3), dict(roughness=0.8, metallic=1.0),
         dict(roughness=0.4, anisotropy=0.8, metallic=0.5), dict(roughness=0.5, spec_trans=1.0),
         dict(roughness=0.6, spec_trans=0.5, eta=1.33)]


@pytest.mark.parametrize("kw", CASES)
@pytest.mark.parametrize("theta", [0.3, 1.2])
def test_sampling_matches_density(kw, theta, gen):
    """E[f cos / pdf] under ``sample`` equals the same integral by uniform-sphere quadrature."""
    p = surface(N, **kw)
    wo = fixed_wo(N, theta)
    wi, ok = B.sample(p, wo, torch.rand((N, 3), generator=gen, dtype=torch.float64))
    f, pdf = B.evaluate(p, wo, wi)
    good = ok & (pdf > 0)
    w = torch.where(good[:, None], f * wi[:, 2:].abs() / torch.where(good, pdf, 1.0)[:, None], 0.0)
    by_sampling = w.mean(0).numpy()
    u = uniform_sphere(N, gen)
    fu, pdf_u = B.evaluate(p, wo, u)
    by_quadrature = (fu * u[:, 2:].abs()).mean(0).numpy() * 4 * math.pi
    np.testing.assert_allclose(by_sampling, by_quadrature, rtol=0.05, atol=0.01)
    # the returned density integrates to at most one (mass lost below the horizon is dropped)
    assert float(pdf_u.mean() * 4 * math.pi) <= 1.03


@pytest.mark.parametrize("kw", CASES)
@pytest.mark.parametrize("theta", [0.0, 0.7, 1.4])
def test_energy_conservation(kw, theta, gen):
    p = surface(N, base=(1.0, 1.0, 1.0), **kw)
    wo = fixed_wo(N, theta)
    u = uniform_sphere(N, gen)
    f, _ = B.evaluate(p, wo, u)
    albedo = (f * u[:, 2:].abs()).mean(0) * 4 * math.pi
    assert float(albedo.max()) <= 1.02


def test_gradient_flows_to_base_color():
    p = surface(4)
    p.base.requires_grad_(True)
    wo = fixed_wo(4, 0.2)
    wi = fixed_wo(4, 0.5)
    f, pdf = B.evaluate(p, wo, wi)
    f.sum().backward()
    assert p.base.grad is not None and torch.all(p.base.grad > 0)
    assert not pdf.requires_grad
