"""Compiled vs numpy blending kernel: forward and forward+backward timings.

    python3 benchmarks/bench_raster.py [--splats 2000] [--size 128] [--repeat 3]
"""
import argparse
import time

import numpy as np
import torch

from splatcams.core import CameraView, Pinhole, Pose, Splats
from splatcams.raster import _backend, _kernel_py, render_gbuffer, set_threads


def scene(n, size, seed=0):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1, 1, (n, 3))
    means[:, 2] *= 0.2
    sp = Splats.create(means, rng.normal(size=(n, 4)), rng.uniform(0.02, 0.08, (n, 2)), rng.uniform(0.2, 0.9, n),
                       rng.uniform(0.1, 0.9, (n, 3)), rng.uniform(0.1, 0.9, n), sh=rng.normal(0, 0.2, (n, 9, 3)))
    view = CameraView(Pinhole.from_fov(50, size, size), Pose.look_at([0.3, -0.5, 2.5], [0, 0, 0]))
    return sp, view


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splats", type=int, default=2000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(1)
    set_threads(args.threads)
    sp, view = scene(args.splats, args.size)

    def forward():
        with torch.no_grad():
            render_gbuffer(sp, view)

    def backward():
        leaf = sp.detach().requires_grad_()
        gb = render_gbuffer(leaf, view)
        (gb.C_g.sum() + gb.D.sum() + gb.N.sum() + gb.distortion.sum()).backward()

    compiled = _backend.kernel
    rows = []
    for name, kern in (("compiled", compiled), ("python", _kernel_py)):
        if name == "compiled" and kern is _kernel_py:
            print("compiled kernel not built; skipping")
            continue
        _backend.kernel = kern
        rows.append((name, best_of(forward, args.repeat), best_of(backward, args.repeat)))
    _backend.kernel = compiled

    print(f"{args.splats} splats, {args.size}x{args.size}, {args.threads} thread(s), best of {args.repeat}")
    print(f"{'kernel':10s} {'forward s':>10s} {'fwd+bwd s':>10s}")
    for name, f, b in rows:
        print(f"{name:10s} {f:10.3f} {b:10.3f}")
    if len(rows) == 2:
        print(f"speedup    {rows[1][1] / rows[0][1]:10.1f}x {rows[1][2] / rows[0][2]:10.1f}x")


if __name__ == "__main__":
    main()
