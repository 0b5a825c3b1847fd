import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_splats, small_view
from splatcams.core import (CameraView, Pinhole, Pose, ProjectorDevice, identity_psf_logits, psf_logits_from_kernel,
                            srgb_encode)
from splatcams.raster import GBuffer, render_gbuffer
from splatcams.shading import ProjectorFrameLight, brdf_eval, projector_emit, sample_projector, shade, simulate

f64 = torch.float64


def device(w=16, h=12, gamma=2.2, gain=1.0, psf=None, pose=None):
    return ProjectorDevice.create(Pinhole(float(w), float(w), (w - 1) / 2, (h - 1) / 2, w, h), pose or Pose.identity(),
                                  gamma=gamma, gain=gain, psf=psf)


def flat_gbuffer(view, depth=2.0, B=0.5, R=0.5, O=1.0, C_g=0.0, normal=(0, 0, -1.0)):
    k = view.intrinsics
    H, W = k.height, k.width
    full = lambda v, *s: torch.full((H, W, *s), float(v), dtype=f64)  # noqa: E731
    N = torch.tensor(normal, dtype=f64).expand(H, W, 3).clone()
    return GBuffer(C_g=full(C_g, 3), B=full(B, 3), R=full(R), D=full(depth), O=full(O), N=N,
                   normal_blend=torch.zeros(H, W, 3, dtype=f64), distortion=full(0), view=view)


def test_projector_emit_black_and_white():
    dev = device(gamma=1.7, gain=1.3)
    black = projector_emit(torch.zeros(12, 16, 3, dtype=f64), dev).radiance
    assert not bool(black.any())
    white = projector_emit(torch.ones(12, 16, 3, dtype=f64), dev).radiance
    np.testing.assert_allclose(white[2:-2, 2:-2].numpy(), 1.3, rtol=1e-12)


def test_projector_emit_uniform_kernel_spreads_a_dot():
    dev = device(gain=2.0, psf=np.ones((5, 5)))
    pat = torch.zeros(12, 16, 3, dtype=f64)
    pat[6, 7] = 1.0
    L = projector_emit(pat, dev).radiance
    np.testing.assert_allclose(L[4:9, 5:10].numpy(), 2.0 / 25, rtol=1e-12)
    assert float(L.sum()) == pytest.approx(3 * 2.0, rel=1e-12)
    assert float(L[3].abs().max()) == 0.0


def test_projector_emit_kernel_is_convolved_not_correlated():
    kern = np.zeros((5, 5))
    kern[2, 3] = 1.0  # shift by +1 column
    dev = device(gamma=1.0, psf=kern)
    pat = torch.zeros(12, 16, 3, dtype=f64)
    pat[6, 7] = 1.0
    L = projector_emit(pat, dev).radiance
    assert float(L[6, 8, 0]) == pytest.approx(1.0, abs=1e-9)


def test_identity_psf_switch_is_noop():
    dev = device(gamma=2.0, gain=1.5)
    dev.psf_raw = identity_psf_logits()
    pat = torch.rand(12, 16, 3, dtype=f64, generator=torch.Generator().manual_seed(0))
    on = projector_emit(pat, dev, True).radiance
    off = projector_emit(pat, dev, False).radiance
    assert float((on - off).abs().max()) <= 1e-15


def test_sample_projector_taps():
    dev = device(w=4, h=4)
    img = torch.arange(48, dtype=f64).reshape(4, 4, 3)
    light = ProjectorFrameLight(img)
    K = dev.intrinsics

    def point(u, v, z=2.0):
        return torch.tensor([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], dtype=f64)

    L, omega, lit = sample_projector(light, point(1, 2), dev)
    assert bool(lit) and torch.allclose(L, img[2, 1], atol=1e-12)
    L, _, _ = sample_projector(light, point(1.5, 2.5), dev)
    expect = (img[2, 1] + img[2, 2] + img[3, 1] + img[3, 2]) / 4
    assert torch.allclose(L, expect, atol=1e-12)
    np.testing.assert_allclose(omega.norm().item(), 1.0)
    L, _, lit = sample_projector(light, point(-0.5, 1), dev)
    assert not bool(lit) and not bool(L.any())
    L, _, lit = sample_projector(light, torch.tensor([0.0, 0, -1], dtype=f64), dev)
    assert not bool(lit) and not bool(L.any())


def test_brdf_normal_incidence_oracle():
    n = torch.tensor([0.0, 0, 1], dtype=f64)
    spec = brdf_eval(n, n, n, torch.zeros(3, dtype=f64), torch.tensor(1.0, dtype=f64))
    F = 0.04 + 0.96 * 2 ** (-12.53789)
    assert F == pytest.approx(0.040162, abs=1e-6)
    np.testing.assert_allclose(spec.numpy(), F / (4 * math.pi), rtol=1e-12)
    assert float(spec[0]) == pytest.approx(3.1960e-3, abs=1e-7)
    full = brdf_eval(n, n, n, torch.full((3,), 0.7, dtype=f64), torch.tensor(1.0, dtype=f64))
    np.testing.assert_allclose(full.numpy(), 0.7 / math.pi + F / (4 * math.pi), rtol=1e-12)


def test_brdf_degenerate_half_vector():
    n = torch.tensor([0.0, 0, 1], dtype=f64)
    o = torch.tensor([1.0, 0, 0], dtype=f64)
    f = brdf_eval(o, -o, n, torch.ones(3, dtype=f64), torch.tensor(0.5, dtype=f64))
    np.testing.assert_allclose(f.numpy(), 1 / math.pi, rtol=1e-12)
    assert 1 / math.pi == pytest.approx(0.31831, abs=1e-5)


def test_shade_black_pattern_is_residual_only():
    sp, view = random_splats(1), small_view()
    dev = device(w=32, h=32, pose=Pose.look_at([0.2, -0.3, 2.2], [0, 0, 0]))
    out, gb = simulate(sp, dev, view, torch.zeros(32, 32, 3, dtype=f64))
    assert not bool(out.C_p.any())
    assert torch.equal(out.image, srgb_encode(gb.C_g.clamp_min(0)).clamp(0, 1))


def test_shade_lambertian_plane():
    view = CameraView(Pinhole(9.0, 9.0, 4.0, 4.0, 9, 9), Pose.identity())
    dev = device(w=9, h=9, gamma=1.0, gain=1.0)
    dev = ProjectorDevice(view.intrinsics, Pose.identity(), dev.gamma_raw, dev.gain_raw, dev.psf_raw)
    gb = flat_gbuffer(view, B=0.6, R=1.0)
    light = ProjectorFrameLight(torch.full((9, 9, 3), 0.8, dtype=f64))
    out = shade(gb, light, view, dev)
    spec = (0.04 + 0.96 * 2 ** (-12.53789)) / (4 * math.pi)
    np.testing.assert_allclose(out.C_p[4, 4].numpy(), (0.6 / math.pi + spec) * 0.8, rtol=1e-12)
    # the diffuse term carries all but ~2% of the light
    assert abs(float(out.C_p[4, 4, 0]) - 0.6 * 0.8 / math.pi) < 0.02 * 0.6 * 0.8 / math.pi


def test_shade_backfacing_and_uncovered_pixels_get_no_projector_light():
    view = CameraView(Pinhole(9.0, 9.0, 4.0, 4.0, 9, 9), Pose.identity())
    dev = ProjectorDevice.create(view.intrinsics, Pose.identity())
    light = ProjectorFrameLight(torch.ones(9, 9, 3, dtype=f64))
    back = shade(flat_gbuffer(view, normal=(0, 0, 1.0), C_g=0.1), light, view, dev)
    assert not bool(back.C_p.any())
    empty = shade(flat_gbuffer(view, O=0.0, C_g=0.2), light, view, dev)
    assert not bool(empty.C_p.any())
    np.testing.assert_allclose(empty.linear.numpy(), 0.2)


@settings(max_examples=15)
@given(arrays(np.float64, (32, 32, 3), elements=st.floats(0, 0.9)),
       arrays(np.float64, (32, 32, 3), elements=st.floats(0, 0.1)))
def test_more_projector_input_never_darkens(pattern, delta):
    sp, view = random_splats(4), small_view()
    dev = device(w=32, h=32, gamma=2.0, gain=1.2, psf=np.random.default_rng(0).uniform(0, 1, (5, 5)),
                 pose=Pose.look_at([0.2, -0.3, 2.2], [0, 0, 0]))
    gb = render_gbuffer(sp, view)
    lo = shade(gb, projector_emit(torch.as_tensor(pattern), dev), view, dev).C_p
    hi = shade(gb, projector_emit(torch.as_tensor(pattern + delta), dev), view, dev).C_p
    assert bool((hi >= lo - 1e-15).all())


def test_energy_bound_per_pixel():
    # B = 1, R = 1, no residual: every pixel is bounded by f(geometry) * G_p
    rng = np.random.default_rng(7)
    sp = random_splats(7)
    sp.albedo_logits = torch.full_like(sp.albedo_logits, 40.0)
    sp.roughness_logits = torch.full_like(sp.roughness_logits, 40.0)
    sp.sh = torch.zeros_like(sp.sh)
    sp.sh[:, 0] = -0.5 / 0.28209479177387814 - 1e-9
    view = small_view()
    gain = 1.7
    dev = device(w=32, h=32, gamma=2.2, gain=gain, pose=Pose.look_at([0.1, -0.4, 2.0], [0, 0, 0]))
    out, gb = simulate(sp, dev, view, torch.ones(32, 32, 3, dtype=f64))
    assert not bool(gb.C_g.any())
    Rw, t = (torch.as_tensor(m) for m in (view.pose.matrix, view.pose.translation))
    for _ in range(40):
        y, x = rng.integers(0, 32, 2)
        if float(gb.O[y, x]) <= 1e-6:
            continue
        ray = view.intrinsics.ray_grid()[y, x]
        xs = (gb.D[y, x] * ray - t) @ Rw
        n = gb.N[y, x] @ Rw
        wo = torch.as_tensor(view.pose.center) - xs
        wo = wo / wo.norm()
        wp = torch.as_tensor(dev.pose.center) - xs
        wp = wp / wp.norm()
        cos = max(float(wp @ n), 0.0)
        f_max = float(brdf_eval(wo, wp, n, torch.ones(3, dtype=f64), torch.tensor(1.0, dtype=f64))[0])
        assert float(out.linear[y, x].max()) <= f_max * gain * cos + 1e-12


def test_psf_logits_from_kernel_roundtrip():
    k = np.random.default_rng(1).uniform(0.1, 1, (5, 5))
    dev = device(psf=k)
    np.testing.assert_allclose(dev.psf.numpy(), k / k.sum(), rtol=1e-12)
    logits = psf_logits_from_kernel(k)
    assert logits.shape == (5, 5)
