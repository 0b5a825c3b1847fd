import csv
import json

import numpy as np
import pytest
import torch

from splatcams.cli import run
from splatcams.raster import render_gbuffer
from splatcams.scene_io import load_checkpoint, read_pfm, read_png, write_png
from splatcams.scene_io.images import to_uint8
from splatcams.scene_io.synth import residual_only


def test_gradcheck_default_passes(capsys):
    assert run(["gradcheck", "--per-class", "4"]) == 0
    out = capsys.readouterr()
    assert "PASS" in out.out
    for name in ("p", "q", "s", "o", "c_g", "b", "r", "gamma_p", "G_p", "kappa"):
        assert any(line.split()[0] == name for line in out.out.splitlines()[1:])
    assert json.loads(out.err.splitlines()[0])["command"] == "gradcheck"


def test_gradcheck_failure_exit_code():
    # a tolerance nothing can meet
    assert run(["gradcheck", "--per-class", "2", "--tol", "-1"]) == 2


def test_invalid_usage_exit_codes(tmp_path, capsys):
    assert run(["gradcheck", "--bogus"]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["simulate", "--ckpt", str(tmp_path / "none.gspc"), "--view", "0", "--pattern", "p.png",
                "--out", "o.png"]) == 1
    assert "none.gspc" in capsys.readouterr().err
    assert run(["--threads", "0", "gradcheck"]) == 1


def test_simulate_black_pattern_and_gbuffer_dump(tiny_dataset, tmp_path):
    ds, gt, root = tiny_dataset
    pk = gt.device.intrinsics
    write_png(tmp_path / "black.png", np.zeros((pk.height, pk.width, 3)))
    code = run(["--quiet", "simulate", "--ckpt", str(root / "gt.gspc"), "--view", "1",
                "--pattern", str(tmp_path / "black.png"), "--out", str(tmp_path / "sim.png"),
                "--dump-gbuffer", str(tmp_path / "gb")])
    assert code == 0
    ck = load_checkpoint(root / "gt.gspc")
    with torch.no_grad():
        gb = render_gbuffer(ck.splats, ck.camera(1))
    np.testing.assert_array_equal(read_png(tmp_path / "sim.png"), to_uint8(residual_only(gb)) / 255.0)
    for name in ("D", "N", "B", "R", "O", "C_p", "C_g"):
        assert (tmp_path / "gb" / f"{name}.png").is_file()
        assert np.isfinite(read_pfm(tmp_path / "gb" / f"{name}.pfm")).all()
    assert not read_pfm(tmp_path / "gb" / "C_p.pfm").any()
    np.testing.assert_allclose(read_pfm(tmp_path / "gb" / "D.pfm"), gb.D.numpy(), rtol=1e-6)


def test_simulate_rejects_wrong_pattern_size(tiny_dataset, tmp_path, capsys):
    _, _, root = tiny_dataset
    write_png(tmp_path / "p.png", np.zeros((5, 5, 3)))
    assert run(["simulate", "--ckpt", str(root / "gt.gspc"), "--view", "0", "--pattern", str(tmp_path / "p.png"),
                "--out", str(tmp_path / "o.png")]) == 1
    assert "p.png" in capsys.readouterr().err


def test_eval_csv(tmp_path):
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    a = np.full((8, 8, 3), 0.4)
    write_png(tmp_path / "pred" / "f0.png", a)
    write_png(tmp_path / "gt" / "f0.png", a)
    write_png(tmp_path / "pred" / "f1.png", np.clip(a + 0.1, 0, 1))
    write_png(tmp_path / "gt" / "f1.png", a)
    np.save(tmp_path / "p.npy", np.zeros((3, 3)))
    np.save(tmp_path / "g.npy", np.ones((2, 3)))
    assert run(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--out",
                str(tmp_path / "m.csv"), "--pred-points", str(tmp_path / "p.npy"),
                "--gt-points", str(tmp_path / "g.npy")]) == 0
    rows = list(csv.DictReader((tmp_path / "m.csv").open()))
    assert list(rows[0]) == ["frame", "psnr_db", "ssim", "d_err"]
    assert float(rows[0]["psnr_db"]) == 100.0 and float(rows[0]["ssim"]) == pytest.approx(1.0)
    assert float(rows[1]["psnr_db"]) == pytest.approx(10 * np.log10(1 / (26 / 255) ** 2), abs=1e-6)
    assert float(rows[0]["d_err"]) == pytest.approx(np.sqrt(3))
    assert run(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "nothing"),
                "--out", str(tmp_path / "x.csv")]) == 1


def test_synth_train_compensate_roundtrip(tmp_path):
    spec = {"surface": "plane", "grid": 8, "n_views": 2, "n_eval_views": 1, "image_size": 16,
            "projector_size": 16, "n_patterns": 2, "n_eval_patterns": 1}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    data = tmp_path / "data"
    assert run(["--quiet", "--seed", "4", "synth", "--spec", str(tmp_path / "spec.json"), "--out", str(data)]) == 0

    def fit(out, threads, quiet):
        argv = ["train", "--data", str(data), "--out", str(out), "--iters", "12", "--init", "from-checkpoint",
                "--init-ckpt", str(data / "gt.gspc"), "--perturb", "0.02", "--seed", "1", "--threads", str(threads),
                "--metrics", str(out) + ".csv"]
        return run((["--quiet"] if quiet else []) + argv)

    assert fit(tmp_path / "a.gspc", 1, True) == 0
    assert fit(tmp_path / "b.gspc", 2, False) == 0
    assert (tmp_path / "a.gspc").read_bytes() == (tmp_path / "b.gspc").read_bytes()
    assert (tmp_path / "a.gspc.csv").read_text() == (tmp_path / "b.gspc.csv").read_text()

    target = read_png(next((data / "frames").glob("view0_cap0.png")))
    write_png(tmp_path / "target.png", target)
    assert run(["--quiet", "compensate", "--ckpt", str(tmp_path / "a.gspc"), "--view", "0", "--target",
                str(tmp_path / "target.png"), "--out-pattern", str(tmp_path / "pat.png"), "--iters", "20",
                "--out-sim", str(tmp_path / "sim.png")]) == 0
    assert read_png(tmp_path / "pat.png").shape == (16, 16, 3)
    assert read_png(tmp_path / "sim.png").shape == target.shape

    assert run(["--quiet", "train", "--data", str(data), "--out", str(tmp_path / "rgb.gspc"), "--iters", "2",
                "--gain-channels", "3"]) == 0
    assert load_checkpoint(tmp_path / "rgb.gspc").device.gain.shape == (3,)


def test_train_reports_bad_config(tiny_dataset, tmp_path, capsys):
    _, _, root = tiny_dataset
    (tmp_path / "cfg.json").write_text(json.dumps({"no_such_field": 1}))
    assert run(["train", "--data", str(root), "--out", str(tmp_path / "x.gspc"), "--iters", "1",
                "--config", str(tmp_path / "cfg.json")]) == 1
    assert "--config" in capsys.readouterr().err
    assert run(["train", "--data", str(root), "--out", str(tmp_path / "x.gspc"), "--init", "from-points"]) == 1
