import numpy as np
import pytest
import torch

from splatcams.compensation import CompensationTask, _Simulator, compensate, reachable_mask, simulate_pattern
from splatcams.scene_io import Checkpoint, psnr

Y00 = 0.28209479177387814


@pytest.fixture(scope="module")
def model(tiny_dataset):
    ds, gt, _ = tiny_dataset
    return gt


def known_pattern(gt, seed=0):
    pk = gt.device.intrinsics
    rng = np.random.default_rng(seed)
    # smooth enough to stay away from the sigmoid tails
    coarse = rng.uniform(0.2, 0.8, (pk.height // 4, pk.width // 4, 3))
    return np.kron(coarse, np.ones((4, 4, 1)))


def test_self_consistency(model):
    P = known_pattern(model)
    target = simulate_pattern(model, 0, P)
    pattern, report = compensate(CompensationTask(model, 0, target, iterations=500))
    assert report.psnr >= 40.0
    assert pattern.shape == P.shape


def test_result_beats_gray_projection(model):
    cam = model.camera(1)
    h, w = cam.intrinsics.height, cam.intrinsics.width
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    target = np.stack([0.3 + 0.4 * xx, 0.6 - 0.3 * yy, 0.2 + 0.3 * xx * yy], -1)
    pattern, report = compensate(CompensationTask(model, 1, target, iterations=200))
    gray = simulate_pattern(model, 1, np.full_like(pattern, 0.5))
    assert report.psnr > psnr(gray, target, report.mask)


def test_dark_target_drives_pattern_to_zero(model):
    sp = model.splats.detach()
    sp.sh = torch.zeros_like(sp.sh)
    sp.sh[:, 0] = -0.5 / Y00 - 1e-9  # residual light switched off
    dark = Checkpoint(sp, model.device, model.cameras)
    cam = dark.camera(0)
    target = np.zeros((cam.intrinsics.height, cam.intrinsics.width, 3))
    pattern, report = compensate(CompensationTask(dark, 0, target, iterations=500, lr=5e-2))
    # only pattern pixels that reach the camera receive gradient
    sim = _Simulator(dark, cam, True)
    p = torch.full(pattern.shape, 0.5, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(sim(p).image.sum(), p)
    seen = (g.abs() > 1e-3 * float(g.abs().max()))
    assert bool(seen.any())
    # Adam moves each logit by at most ~lr per step, so 500 steps cannot saturate far past 2%
    assert float(torch.as_tensor(pattern)[seen].max()) <= 0.02


def test_invariants(model):
    before = {k: v.clone() for k, v in {**model.splats.params(), **model.device.params()}.items()}
    target = simulate_pattern(model, 0, known_pattern(model, 3)) * 0.9
    pattern, report = compensate(CompensationTask(model, 0, target, iterations=60, lr=5e-2))
    after = {**model.splats.params(), **model.device.params()}
    for k, v in before.items():
        assert torch.equal(v, after[k]), k
    assert 0.0 <= pattern.min() and pattern.max() <= 1.0
    best = report.best_so_far
    assert len(best) == 60 and all(b >= a for a, b in zip(best[1:], best))
    assert report.best_loss == min(report.losses)


def test_reachable_mask_matches_white_capture(model):
    cam = model.camera(0)
    sim = _Simulator(model, cam, True)
    m = reachable_mask(sim)
    assert m.dtype == bool and m.shape == (cam.intrinsics.height, cam.intrinsics.width)
    assert m.any()


def test_rejects_bad_tasks(model):
    cam = model.camera(0)
    h, w = cam.intrinsics.height, cam.intrinsics.width
    with pytest.raises(ValueError):
        compensate(CompensationTask(model, 0, np.zeros((h + 1, w, 3))))
    with pytest.raises(ValueError):
        compensate(CompensationTask(model, 0, np.full((h, w, 3), 1.5)))
    with pytest.raises(ValueError):
        compensate(CompensationTask(model, 0, np.zeros((h, w, 3)), iterations=0))
    with pytest.raises(ValueError):
        compensate(CompensationTask(model, 0, np.zeros((h, w, 3)), mask=np.zeros((h, w), bool)))
    with pytest.raises(ValueError):
        compensate(CompensationTask(model, 99, np.zeros((h, w, 3))))
