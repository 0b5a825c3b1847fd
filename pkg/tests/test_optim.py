import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_splats
from splatcams.core import NumericalError
from splatcams.losses import LossWeights
from splatcams.optim import (NDC_NEAR, Adam, TrainConfig, _step_weights, adam_step, default_device, evaluate,
                             init_splats, means_lr, perturb_splats, prune_mask, reference_depth,
                             resolve_depth_scale, train, write_metrics)
from splatcams.raster import render_gbuffer
from splatcams.scene_io import DataError, Frame, SceneDataset
from splatcams.shading import simulate

f64 = torch.float64


def test_adam_zero_gradient_is_a_fixed_point():
    p = torch.tensor([1.0, -2.0, 3.0], dtype=f64)
    z = torch.zeros(3, dtype=f64)
    new, m, v = adam_step(p, z, z, z, 1, 0.1)
    assert torch.equal(new, p)


@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]), st.floats(1e-4, 1e-1))
def test_adam_first_step_moves_by_lr(mag, sign, lr):
    p = torch.zeros(1, dtype=f64)
    g = torch.full((1,), sign * mag, dtype=f64)
    new, _, _ = adam_step(p, g, torch.zeros(1, dtype=f64), torch.zeros(1, dtype=f64), 1, lr)
    assert float(new) == pytest.approx(-sign * lr * mag / (mag + 1e-8), rel=1e-12)


def test_adam_constant_gradient_keeps_lr_step():
    opt = Adam({"x": torch.zeros(2, dtype=f64)}, {"x": 0.01})
    x = {"x": torch.zeros(2, dtype=f64)}
    g = {"x": torch.tensor([0.5, -3.0], dtype=f64)}
    for k in range(1, 6):
        x = opt.step(x, g)
        np.testing.assert_allclose(x["x"].numpy(), [-0.01 * k, 0.01 * k], rtol=1e-6)


def test_adam_rejects_nonfinite_gradient():
    opt = Adam({"x": torch.zeros(2, dtype=f64)}, {"x": 0.01})
    with pytest.raises(NumericalError):
        opt.step({"x": torch.zeros(2, dtype=f64)}, {"x": torch.tensor([0.0, float("nan")], dtype=f64)})


def test_means_lr_schedule_endpoints():
    assert means_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert means_lr(99, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert means_lr(49.5, 100, 1e-3, 1e-5) == pytest.approx(1e-4)


def test_grid_on_plane_init():
    sp = init_splats("grid-on-plane", plane={"center": [0, 0, 1], "normal": [0, 0, 1], "size": 0.9, "count": 10})
    assert len(sp) == 100
    np.testing.assert_allclose(sp.scales().numpy(), 0.1, rtol=1e-12)
    np.testing.assert_allclose(sp.opacities().numpy(), 0.5)
    np.testing.assert_allclose(sp.albedo().numpy(), 0.5)
    np.testing.assert_allclose(sp.roughness().numpy(), 0.5)
    assert not bool(sp.sh.any())
    from splatcams.core import tangent_frame
    normals = tangent_frame(sp.quats)[2]
    np.testing.assert_allclose(normals.abs().numpy()[:, 2], 1.0, atol=1e-12)
    np.testing.assert_allclose(sp.means[:, 2].numpy(), 1.0)


def test_from_points_init():
    one = init_splats("from-points", points=[[0.1, 0.2, 0.3]])
    assert len(one) == 1 and float(one.scales()[0, 0]) > 0
    g = np.linspace(0, 0.4, 5)
    x, y = np.meshgrid(g, g)
    pts = np.stack([x.ravel(), y.ravel(), np.zeros(25)], 1)
    sp = init_splats("from-points", points=pts, k_neighbors=1)
    np.testing.assert_allclose(sp.scales().numpy(), 0.1, rtol=1e-9)
    with pytest.raises(DataError):
        init_splats("from-points", points=np.zeros((0, 3)))
    with pytest.raises(ValueError):
        init_splats("somewhere")


def test_perturb_resets_materials_only_when_asked():
    sp = random_splats(0)
    a = perturb_splats(sp, 0.04, seed=1)
    assert not bool(a.albedo_logits.any()) and not bool(a.roughness_logits.any())
    assert torch.equal(a.sh, sp.sh)
    b = perturb_splats(sp, 0.0, reset_materials=False)
    assert torch.equal(b.means, sp.means) and torch.equal(b.albedo_logits, sp.albedo_logits)
    c = perturb_splats(sp, 0.04, seed=1)
    assert torch.equal(a.means, c.means)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(lr={"means": 0.0})
    with pytest.raises(ValueError):
        TrainConfig(depth_scale=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(distortion_start=1.5)
    with pytest.raises(ValueError):
        TrainConfig(dtype="f16")
    cfg = TrainConfig(weights={"depth": 10.0})
    assert cfg.weights.depth == 10.0 and cfg.lr["sh"] == 2.5e-3


def test_regularizer_warmup_and_depth_scale(tiny_dataset):
    ds, gt, _ = tiny_dataset
    cfg = TrainConfig(iterations=100)
    early, late = _step_weights(cfg, 5, 50.0), _step_weights(cfg, 30, 50.0)
    assert early.depth == 0.0 and early.normal == 0.0
    assert late.depth == pytest.approx(1000.0 / 50.0) and late.normal == 0.05
    assert _step_weights(cfg, 20, 50.0).normal == 0.0
    cams = [ds.cameras[v] for v in ds.train_views]
    z = reference_depth(gt.splats, cams)
    assert resolve_depth_scale(cfg, gt.splats, cams) == pytest.approx(z * z / NDC_NEAR)
    assert resolve_depth_scale(TrainConfig(depth_scale=3.0), gt.splats, cams) == 3.0


def test_prune_removes_dead_splat_without_changing_render(tiny_dataset):
    ds, gt, _ = tiny_dataset
    sp = gt.splats.detach()
    sp.opacity_logits = sp.opacity_logits.clone()
    sp.opacity_logits[7] = -math.inf
    keep = prune_mask(sp, TrainConfig(), ds, {})
    assert int((~keep).sum()) == 1 and not bool(keep[7])
    view = ds.cameras[0]
    a, b = render_gbuffer(sp, view), render_gbuffer(sp.select(keep), view)
    for k in ("C_g", "B", "R", "D", "O", "N"):
        assert float((getattr(a, k) - getattr(b, k)).abs().max()) <= 1e-6, k


def test_mask_pruning_drops_splats_outside_every_view(tiny_dataset):
    ds, gt, _ = tiny_dataset
    sp = gt.splats.detach()
    sp.means = sp.means.clone()
    sp.means[0] = torch.tensor([40.0, 40.0, 0.0], dtype=f64)
    dil = {v: m for v, m in ds.masks.items()}
    keep = prune_mask(sp, TrainConfig(use_mask=True), ds, dil)
    assert not bool(keep[0])


def unquantized(ds, gt):
    """The same dataset with captures rendered exactly by the training forward model."""
    frames = []
    with torch.no_grad():
        for f in ds.frames:
            out, _ = simulate(gt.splats, gt.device, ds.cameras[f.view], torch.as_tensor(f.pattern))
            frames.append(Frame(f.view, f.pattern, out.image.numpy(), f.split, f.black, f.index))
    return SceneDataset(ds.cameras, ds.projector_intrinsics, ds.projector_pose, frames, ds.masks)


def test_ground_truth_is_a_fixed_point(tiny_dataset):
    ds, gt, _ = tiny_dataset
    exact = unquantized(ds, gt)
    # pure L1: its gradient vanishes exactly at zero residual. The SSIM term leaves
    # ~1e-18 roundoff gradients there, which Adam rescales into full-size steps.
    w = LossWeights(lam=0.0, depth=0.0, normal=0.0, material=0.0, entropy=0.0)
    cfg = TrainConfig(iterations=20, weights=w, prune_interval=0, eval_interval=0)
    res = train(exact, gt.splats, gt.device, cfg)
    assert max(r["loss"] for r in res.metrics) <= 1e-6
    for k, v in res.checkpoint.splats.params().items():
        assert torch.equal(v, gt.splats.params()[k]), k
    assert res.final_psnr >= 60.0


def test_training_improves_and_is_deterministic(tiny_dataset, tmp_path):
    ds, gt, _ = tiny_dataset
    sp = perturb_splats(gt.splats, 0.03, seed=2)
    dev = default_device(gt.device.intrinsics, gt.device.pose)
    cfg = TrainConfig(iterations=40, eval_interval=20, prune_interval=20)
    a = train(ds, sp, dev, cfg, metrics_path=tmp_path / "m.csv")
    b = train(ds, sp, dev, cfg)
    assert a.final_psnr > a.initial_psnr
    for k, v in a.checkpoint.splats.params().items():
        assert torch.equal(v, b.checkpoint.splats.params()[k]), k
    assert [r["loss"] for r in a.metrics] == [r["loss"] for r in b.metrics]
    head = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert head[:8] == ["step", "loss", "color", "distortion", "normal", "material", "entropy", "psnr"]
    assert a.checkpoint.iteration == 40
    assert evaluate(a.checkpoint.splats, a.checkpoint.device, ds) == pytest.approx(a.final_psnr)


def test_training_rejects_missing_masks(tiny_dataset):
    ds, gt, _ = tiny_dataset
    bare = SceneDataset(ds.cameras, ds.projector_intrinsics, ds.projector_pose, ds.frames, {})
    with pytest.raises(DataError):
        train(bare, gt.splats, gt.device, TrainConfig(iterations=1, use_mask=True))


@settings(max_examples=5)
@given(st.integers(0, 1000))
def test_write_metrics_roundtrip(tmp_path_factory, seed):
    import csv
    rows = [{"step": i, "loss": float(np.random.default_rng(seed + i).random())} for i in range(1, 4)]
    p = tmp_path_factory.mktemp("m") / "metrics.csv"
    write_metrics(rows, p)
    got = list(csv.DictReader(p.open()))
    assert [float(r["loss"]) for r in got] == [r["loss"] for r in rows]
