"""Time the numba kernels against their numpy twins.

Each backend runs in its own interpreter, because the choice is fixed at import
time by DIRACTRAJ_DISABLE_NUMBA. Usage::

    python3 benchmarks/bench_kernels.py [--repeat 3] [--labels 6]

Prints one table row per workload with the best wall time of each backend and
the speed-up, and checks that both backends give the same numbers.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _workloads(labels):
    import numpy as np

    from diractraj import angular as ang
    from diractraj.kernels import lagrange_interpolate, trilinear_periodic
    from diractraj.reference import gaussian_packet_field, plane_wave_field
    from diractraj.trajectory import LabelGrid, integrate_bundle

    rng = np.random.default_rng(0)
    fld = gaussian_packet_field(32, 20.0, 2.0)
    re = np.ascontiguousarray(fld.values.real)
    pts = rng.uniform(0, 20.0, size=(20000, 3))
    disp = rng.normal(scale=0.1, size=(16, 16, 16, 3))
    grid = LabelGrid(labels, 20.0, ang.AngularNodes(2, 2, 4), plane_wave_field(labels, 20.0))

    def interp():
        v, g = lagrange_interpolate(re, 20.0, pts)
        return float(v.sum() + g.sum())

    def trilinear():
        return float(trilinear_periodic(disp, 20.0, pts).sum())

    def evolve():
        b = integrate_bundle(grid, mode="self_contained", dt=0.005, T=0.25, branch="R")
        return float(b.q[-1].sum() + b.J[-1].sum())

    return {"lagrange_interpolate": interp, "trilinear_periodic": trilinear, "self_contained_step": evolve}


def _child(repeat, labels):
    out = {}
    for name, fn in _workloads(labels).items():
        value = fn()  # warm-up, includes numba compilation
        best = min(_timed(fn) for _ in range(repeat))
        out[name] = {"seconds": best, "value": value}
    print(json.dumps(out))


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _run_backend(disable, repeat, labels):
    env = dict(os.environ, DIRACTRAJ_DISABLE_NUMBA="1" if disable else "0")
    cmd = [sys.executable, __file__, "--child", "--repeat", str(repeat), "--labels", str(labels)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--labels", type=int, default=6)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        _child(args.repeat, args.labels)
        return
    fast = _run_backend(False, args.repeat, args.labels)
    slow = _run_backend(True, args.repeat, args.labels)
    print(f"{'workload':<22} {'numba s':>10} {'numpy s':>10} {'speed-up':>9}  agree")
    for name in fast:
        a, b = fast[name], slow[name]
        agree = abs(a["value"] - b["value"]) <= 1e-9 * max(1.0, abs(b["value"]))
        print(f"{name:<22} {a['seconds']:>10.4f} {b['seconds']:>10.4f} {b['seconds'] / a['seconds']:>9.1f}  {agree}")


if __name__ == "__main__":
    main()
