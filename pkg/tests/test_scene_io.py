import json
import math
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_splats
from splatcams.core import srgb_decode
from splatcams.optim import default_device
from splatcams.raster import render_gbuffer_bruteforce
from splatcams.scene_io import (Checkpoint, DataError, SyntheticSceneSpec, d_err, load_checkpoint, load_dataset, psnr,
                                read_mask, read_pfm, read_png, save_checkpoint, save_dataset, ssim, synth_dataset,
                                write_mask, write_pfm, write_png)
from splatcams.scene_io.checkpoint import _HEADER
from splatcams.scene_io.synth import quantize, residual_only

SMALL = dict(grid=8, image_size=16, projector_size=16, n_patterns=4, n_eval_patterns=1)


def test_checkpoint_roundtrip_is_bit_identical(tmp_path):
    sp = random_splats(4, sh_degree=3)
    from conftest import small_view
    dev = default_device(small_view().intrinsics, small_view().pose, gain_channels=3)
    dev.gamma_raw = dev.gamma_raw + 0.123456789
    ck = Checkpoint(sp, dev, [small_view(), small_view(16)], 77, {"note": "x"})
    save_checkpoint(ck, tmp_path / "a.gspc")
    back = load_checkpoint(tmp_path / "a.gspc")
    for k, v in {**sp.params(), **dev.params()}.items():
        got = {**back.splats.params(), **back.device.params()}[k]
        assert torch.equal(got, v), k
    assert back.iteration == 77 and back.config == {"note": "x"}
    assert [c.name for c in back.cameras] == ["cam", "cam"]
    assert back.cameras[1].intrinsics == small_view(16).intrinsics
    np.testing.assert_array_equal(back.device.pose.rotation, dev.pose.rotation)


@settings(max_examples=20)
@given(st.integers(0, 23), st.integers(1, 255))
def test_corrupt_header_byte_fails_cleanly(tmp_path_factory, pos, flip):
    d = tmp_path_factory.mktemp("ck")
    sp = random_splats(0, n=5, sh_degree=1)
    from conftest import small_view
    save_checkpoint(Checkpoint(sp, default_device(small_view().intrinsics, small_view().pose)), d / "c.gspc")
    raw = bytearray((d / "c.gspc").read_bytes())
    assert pos < _HEADER.size
    raw[pos] ^= flip
    (d / "c.gspc").write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_checkpoint(d / "c.gspc")


def test_checkpoint_missing_and_truncated(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope.gspc")
    (tmp_path / "t.gspc").write_bytes(b"GSPC")
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "t.gspc")


def test_pfm_roundtrip_and_nan_rejection(tmp_path):
    img = np.random.default_rng(0).normal(size=(5, 7, 3)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", img)
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)
    gray = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_pfm(tmp_path / "g.pfm", gray)
    np.testing.assert_array_equal(read_pfm(tmp_path / "g.pfm"), gray)
    with pytest.raises(DataError):
        write_pfm(tmp_path / "n.pfm", np.full((2, 2), np.nan))
    # hand-written file carrying a NaN
    body = np.array([1.0, np.nan, 2.0, 3.0], dtype="<f4").tobytes()
    (tmp_path / "bad.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + body)
    with pytest.raises(DataError, match="NaN"):
        read_pfm(tmp_path / "bad.pfm")
    (tmp_path / "hdr.pfm").write_bytes(b"PX\n2 2\n-1.0\n" + body)
    with pytest.raises(DataError, match="header"):
        read_pfm(tmp_path / "hdr.pfm")


def test_png_roundtrip_and_gray_128(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (6, 9, 3)) / 255.0
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "a.png"), img)
    write_png(tmp_path / "g.png", np.full((2, 2, 3), 128 / 255))
    lin = srgb_decode(torch.as_tensor(read_png(tmp_path / "g.png")))
    assert float(lin[0, 0, 0]) == pytest.approx(0.2158, abs=1e-4)
    m = np.eye(4, dtype=bool)
    write_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), m)
    (tmp_path / "junk.png").write_bytes(b"\x89PNG not really")
    with pytest.raises(DataError):
        read_png(tmp_path / "junk.png")


def test_synth_plane_counts(tmp_path):
    spec = SyntheticSceneSpec(surface="plane", n_views=4, n_eval_views=0, **SMALL)
    ds, gt = synth_dataset(spec, tmp_path)
    assert len(ds.frames) == 20
    assert sum(f.black for f in ds.frames) == 4
    assert len(list((tmp_path / "frames").glob("view*_pat*.png"))) == 20
    assert len(list((tmp_path / "frames").glob("view*_cap*.png"))) == 20
    assert len(list((tmp_path / "frames").glob("view*_mask.png"))) == 4
    assert (tmp_path / "scene.json").is_file() and (tmp_path / "gt.gspc").is_file()
    assert len(gt.cameras) == 4


def test_synth_is_byte_identical_for_same_seed(tmp_path):
    spec = dict(surface="dihedral", n_views=2, n_eval_views=1, seed=9, psf_sigma=1.0, **SMALL)
    synth_dataset(SyntheticSceneSpec(**spec), tmp_path / "a")
    synth_dataset(SyntheticSceneSpec(**spec), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_black_captures_are_residual_only(tiny_dataset):
    ds, gt, _ = tiny_dataset
    blacks = [f for f in ds.frames if f.black]
    assert blacks and all(not f.pattern.any() for f in blacks)
    with torch.no_grad():
        for f in blacks:
            gb = render_gbuffer_bruteforce(gt.splats, ds.cameras[f.view], chunk=512)
            np.testing.assert_array_equal(f.capture, quantize(residual_only(gb)))


def test_dataset_roundtrip_and_validation(tiny_dataset, tmp_path):
    ds, _, root = tiny_dataset
    back = load_dataset(root)
    assert len(back.frames) == len(ds.frames)
    for a, b in zip(ds.frames, back.frames):
        np.testing.assert_array_equal(a.capture, b.capture)
        np.testing.assert_array_equal(a.pattern, b.pattern)
        assert (a.view, a.split, a.black) == (b.view, b.split, b.black)
    for v in ds.masks:
        np.testing.assert_array_equal(ds.masks[v], back.masks[v])
    copy = tmp_path / "copy"
    save_dataset(back, copy)
    assert load_dataset(copy).frames[0].capture.shape == ds.frames[0].capture.shape

    broken = tmp_path / "broken"
    shutil.copytree(root, broken)
    next((broken / "frames").glob("view0_cap*.png")).unlink()
    with pytest.raises(DataError, match="missing"):
        load_dataset(broken)

    bad = tmp_path / "bad"
    shutil.copytree(root, bad)
    scene = json.loads((bad / "scene.json").read_text())
    scene["projectors"] = [scene["projector"], scene["projector"]]
    (bad / "scene.json").write_text(json.dumps(scene))
    with pytest.raises(DataError, match="one projector"):
        load_dataset(bad)
    (bad / "scene.json").write_text("{not json")
    with pytest.raises(DataError):
        load_dataset(bad)

    small = tmp_path / "small"
    shutil.copytree(root, small)
    cap = next((small / "frames").glob("view1_cap*.png"))
    write_png(cap, np.zeros((5, 5, 3)))
    with pytest.raises(DataError, match="shape"):
        load_dataset(small)


def test_synth_rejects_empty_spec():
    with pytest.raises(DataError):
        synth_dataset(SyntheticSceneSpec(n_views=0))
    with pytest.raises(DataError):
        SyntheticSceneSpec.from_dict({"surface": "sphere"})
    with pytest.raises(DataError):
        SyntheticSceneSpec.from_dict({"colour": 1})


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)
    b = np.zeros((10, 10, 3))
    c = b.copy()
    c[0, :, :] = 1.0  # MSE = 0.1 -> 10 dB
    assert psnr(c, b) == pytest.approx(10.0, abs=1e-12)
    assert psnr(a, a) == math.inf
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5, 3)))


def test_ssim_identity():
    a = np.random.default_rng(0).random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_all_ones_mask_changes_nothing(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 14, 3)), rng.random((12, 14, 3))
    ones = np.ones((12, 14), bool)
    assert psnr(a, b, ones) == psnr(a, b)
    assert ssim(a, b, ones) == pytest.approx(ssim(a, b), abs=1e-15)


def test_d_err():
    ref = np.array([[0.0, 0, 0], [1, 0, 0]])
    assert d_err(ref, ref) == 0.0
    assert d_err(np.array([[0.0, 0.5, 0], [1, 0, 0.25]]), ref) == pytest.approx(0.375)
    with pytest.raises(ValueError):
        d_err(np.zeros((0, 3)), ref)
