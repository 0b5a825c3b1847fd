"""Command-line entry point: ``splatcams <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .compensation import CompensationTask, compensate, simulate_pattern
from .core import NumericalError, srgb_encode
from .diff import gradcheck, random_scene
from .optim import TrainConfig, default_device, init_splats, perturb_splats, train
from .raster import set_threads
from .scene_io import (DataError, SyntheticSceneSpec, d_err, load_checkpoint, load_dataset, psnr, read_mask,
                       read_png, save_checkpoint, ssim, synth_dataset, write_pfm, write_png)
from .scene_io.metrics import psnr_csv
from .shading import simulate

log = logging.getLogger("splatcams")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=default)
    g.add_argument("--precision", choices=("f32", "f64"), default=default)
    g.add_argument("--threads", type=int, default=default)
    g.add_argument("--quiet", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatcams", description=__doc__)
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help):
        p = sub.add_parser(name, help=help)
        # SUPPRESS keeps values given before the subcommand from being reset
        _global_flags(p, argparse.SUPPRESS)
        return p

    p = cmd("synth", "generate a synthetic multi-view dataset")
    p.add_argument("--spec", type=Path, help="JSON file with SyntheticSceneSpec fields")
    p.add_argument("--out", type=Path, required=True)

    p = cmd("train", "fit a model to a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--no-psf", action="store_true")
    p.add_argument("--sh-degree", type=int, default=2)
    p.add_argument("--mask", action="store_true", help="use dataset masks (entropy term and pruning)")
    p.add_argument("--init", choices=("from-checkpoint", "grid-on-plane", "from-points"))
    p.add_argument("--init-ckpt", type=Path)
    p.add_argument("--points", type=Path, help=".npy array of shape [N, 3]")
    p.add_argument("--plane", type=json.loads, default=None,
                   help='JSON, e.g. \'{"center": [0,0,0], "normal": [0,0,1], "size": 2, "count": 40}\'')
    p.add_argument("--perturb", type=float, default=0.0, help="std of position jitter applied to the init")
    p.add_argument("--keep-materials", action="store_true", help="do not reset albedo/roughness of the init")
    p.add_argument("--gain-channels", type=int, choices=(1, 3), default=1,
                   help="projector gain: one scalar (default) or one per color channel")
    p.add_argument("--config", type=Path, help="JSON with TrainConfig overrides")
    p.add_argument("--metrics", type=Path, help="CSV metrics log")

    p = cmd("simulate", "render a pattern through a trained model")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--view", required=True, help="camera index or name")
    p.add_argument("--pattern", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-psf", action="store_true")
    p.add_argument("--dump-gbuffer", type=Path, metavar="DIR")

    p = cmd("compensate", "solve for the projector input that produces a target image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--view", required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--out-pattern", type=Path, required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--mask", type=Path)
    p.add_argument("--out-sim", type=Path, help="also write the simulated capture")

    p = cmd("eval", "image metrics between two directories of PNGs")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mask", type=Path, help="directory of masks named like the images")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pred-points", type=Path, help=".npy point cloud for d_err")
    p.add_argument("--gt-points", type=Path)

    p = cmd("gradcheck", "compare analytic and finite-difference gradients")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--scenes", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--per-class", type=int, default=12)
    return parser


def _dtype(args) -> torch.dtype:
    return torch.float32 if args.precision == "f32" else torch.float64


def _progress(args):
    if args.quiet:
        return None
    return lambda row: log.info("step %d  loss %.5f  psnr %.2f dB", row["step"], row["loss"],
                                row.get("psnr", float("nan")))


def _echo(config: dict) -> None:
    print(json.dumps(config, sort_keys=True, default=str), file=sys.stderr)


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec.from_dict(json.loads(args.spec.read_text())) if args.spec else SyntheticSceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    _echo({"command": "synth", "out": str(args.out), "spec": spec.to_dict()})
    ds, _ = synth_dataset(spec, args.out)
    log.info("wrote %d frames to %s", len(ds.frames), args.out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    over = json.loads(args.config.read_text()) if args.config else {}
    over["iterations"] = args.iters
    over["psf_enabled"] = not args.no_psf
    over["use_mask"] = bool(args.mask or over.get("use_mask", False))
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    if args.precision is not None:
        over["dtype"] = args.precision
    try:
        return TrainConfig(**over)
    except TypeError as exc:
        raise ValueError(f"--config: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dtype = cfg.torch_dtype
    ds = load_dataset(args.data)
    mode = args.init or ("from-checkpoint" if args.init_ckpt else "from-points" if args.points else "grid-on-plane")
    if mode == "from-checkpoint" and args.init_ckpt is None:
        raise ValueError("--init from-checkpoint needs --init-ckpt")
    if mode == "from-points" and args.points is None:
        raise ValueError("--init from-points needs --points")
    points = np.load(args.points) if args.points else None
    splats = init_splats(mode, points=points, plane=args.plane, checkpoint=args.init_ckpt,
                         sh_degree=args.sh_degree, dataset=ds, dtype=dtype)
    if splats.sh_degree != args.sh_degree:
        splats = splats.with_sh_degree(args.sh_degree)
    if args.perturb > 0:
        splats = perturb_splats(splats, args.perturb, seed=cfg.seed, reset_materials=not args.keep_materials)
    device = default_device(ds.projector_intrinsics, ds.projector_pose, gain_channels=args.gain_channels, dtype=dtype)
    _echo({"command": "train", "data": str(args.data), "out": str(args.out), "init": mode,
           "perturb": args.perturb, "gain_channels": args.gain_channels, "sh_degree": args.sh_degree, "n_splats": len(splats), "config": cfg.to_dict()})
    result = train(ds, splats, device, cfg, metrics_path=args.metrics, progress=_progress(args))
    save_checkpoint(result.checkpoint, args.out)
    if result.final_psnr is not None:
        log.info("held-out PSNR %.2f dB (initial %.2f dB)", result.final_psnr, result.initial_psnr)
    return EXIT_OK


def _preview_depth(D: np.ndarray, O: np.ndarray) -> np.ndarray:
    covered = O > 1e-6
    out = np.zeros_like(D)
    if covered.any():
        lo, hi = D[covered].min(), D[covered].max()
        out[covered] = 1 - (D[covered] - lo) / max(hi - lo, 1e-12)
    return out


def dump_gbuffer(out_dir: Path, gb, shaded) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    enc = lambda t: srgb_encode(t.clamp_min(0)).clamp(0, 1).numpy()  # noqa: E731
    maps = {
        "D": (gb.D, _preview_depth(gb.D.numpy(), gb.O.numpy())),
        "N": (gb.N, (gb.N.numpy() + 1) / 2),
        "B": (gb.B, enc(gb.B)),
        "R": (gb.R, gb.R.numpy()),
        "O": (gb.O, gb.O.numpy()),
        "C_p": (shaded.C_p, enc(shaded.C_p)),
        "C_g": (gb.C_g, enc(gb.C_g)),
    }
    for name, (raw, preview) in maps.items():
        write_pfm(out_dir / f"{name}.pfm", raw.detach().numpy())
        write_png(out_dir / f"{name}.png", np.clip(preview, 0, 1))


def cmd_simulate(args) -> int:
    ck = load_checkpoint(args.ckpt, dtype=_dtype(args))
    view = ck.camera(args.view)
    pk = ck.device.intrinsics
    pattern = read_png(args.pattern)
    if pattern.shape != (pk.height, pk.width, 3):
        raise DataError(f"{args.pattern}: pattern is {pattern.shape[1]}x{pattern.shape[0]}, "
                        f"projector is {pk.width}x{pk.height}")
    if args.threads is not None:
        set_threads(args.threads)
    _echo({"command": "simulate", "ckpt": str(args.ckpt), "view": view.name, "pattern": str(args.pattern),
           "psf_enabled": not args.no_psf, "precision": args.precision or "f64"})
    with torch.no_grad():
        out, gb = simulate(ck.splats, ck.device, view, torch.as_tensor(pattern, dtype=_dtype(args)),
                           psf_enabled=not args.no_psf, check=True)
    write_png(args.out, out.image.numpy())
    if args.dump_gbuffer:
        dump_gbuffer(args.dump_gbuffer, gb, out)
    return EXIT_OK


def cmd_compensate(args) -> int:
    ck = load_checkpoint(args.ckpt, dtype=_dtype(args))
    target = read_png(args.target)
    mask = read_mask(args.mask) if args.mask else None
    if args.threads is not None:
        set_threads(args.threads)
    task = CompensationTask(ck, args.view, target, mask, args.iters, args.lr)
    _echo({"command": "compensate", "ckpt": str(args.ckpt), "view": str(args.view), "target": str(args.target),
           "iterations": args.iters, "lr": args.lr})
    pattern, report = compensate(task)
    write_png(args.out_pattern, pattern)
    if args.out_sim:
        write_png(args.out_sim, simulate_pattern(ck, args.view, pattern))
    log.info("best loss %.5f at iteration %d, simulated PSNR %.2f dB", report.best_loss, report.best_iteration,
             report.psnr)
    return EXIT_OK


def _png_files(d: Path) -> List[Path]:
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def cmd_eval(args) -> int:
    preds = _png_files(args.pred)
    if not preds:
        raise DataError(f"{args.pred}: no PNG files")
    if (args.pred_points is None) != (args.gt_points is None):
        raise ValueError("--pred-points and --gt-points go together")
    _echo({"command": "eval", "pred": str(args.pred), "gt": str(args.gt), "mask": str(args.mask or ""),
           "out": str(args.out)})
    derr = None
    if args.pred_points is not None:
        derr = d_err(np.load(args.pred_points), np.load(args.gt_points))
    rows = []
    for p in preds:
        g = args.gt / p.name
        if not g.is_file():
            raise DataError(f"no ground truth for {p.name} in {args.gt}")
        a, b = read_png(p), read_png(g)
        if a.shape != b.shape:
            raise DataError(f"{p.name}: shape {a.shape} vs ground truth {b.shape}")
        m = read_mask(args.mask / p.name) if args.mask else None
        rows.append({"frame": p.stem, "psnr_db": psnr_csv(psnr(a, b, m)), "ssim": ssim(a, b, m)})
    cols = ["frame", "psnr_db", "ssim"] + (["d_err"] if derr is not None else [])
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            if derr is not None:
                r["d_err"] = derr
            w.writerow(r)
    log.info("mean PSNR %.2f dB over %d frames", np.mean([r["psnr_db"] for r in rows]), len(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    _echo({"command": "gradcheck", "seed": seed, "eps": args.eps, "tol": args.tol, "scenes": args.scenes})
    ok = True
    for s in range(seed, seed + args.scenes):
        report = gradcheck(random_scene(s), eps=args.eps, tol=args.tol, per_class=args.per_class, seed=s)
        print(f"scene seed {s}: {'PASS' if report.passed else 'FAIL'}")
        for line in report.lines():
            print("  " + line)
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "simulate": cmd_simulate, "compensate": cmd_compensate,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
