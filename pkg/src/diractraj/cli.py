"""Command-line entry point: ``diractraj <subcommand> [flags]``.

Exit codes: 0 when every hard check passes, 1 when a check fails, 2 on a
configuration, file or runtime error. Each run writes ``report.json`` to the
output directory and echoes a one-line summary per check.
"""
from __future__ import annotations

import argparse
import platform
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import scipy

from . import __version__, io
from .config import RunConfig
from .errors import ConfigInvalid, DiracTrajError
from .kernels import HAVE_NUMBA
from .pipelines import PIPELINES

EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def _triple(text):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return vals


def _vector(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if len(vals) == 1:
        vals = [vals[0], 0.0, 0.0]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected one value or three comma-separated values")
    return vals


def build_parser():
    ap = argparse.ArgumentParser(prog="diractraj", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=sorted(PIPELINES))
    ap.add_argument("--config", type=Path, help="JSON run configuration")
    ap.add_argument("--deterministic", action="store_true", default=None,
                    help="single-threaded run with byte-stable outputs")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", type=str, help="output directory")
    ap.add_argument("--mode", choices=("validation", "self_contained"))
    ap.add_argument("--dt", type=float, help="time step (absolute time units)")
    ap.add_argument("--T", type=float, help="final time (absolute time units)")
    ap.add_argument("--labels-per-axis", type=int)
    ap.add_argument("--angle-nodes", type=_triple, help="n_alpha,n_beta,n_gamma")
    ap.add_argument("--branch", choices=("R", "I", "both"))
    ap.add_argument("--eps", type=_vector, help="boost parameter: magnitude along x, or three components")
    ap.add_argument("--halvings", type=int)
    ap.add_argument("--bundles", type=Path, nargs=2, metavar=("R", "I"), help="bundle files for reconstruct")
    ap.add_argument("--refine", action="store_true", help="compare: add the refinement-order study")
    return ap


def _versions():
    out = {"diractraj": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "python": platform.python_version()}
    if HAVE_NUMBA:
        import numba

        out["numba"] = numba.__version__
    return out


def run(argv=None):
    """Parse arguments, run the pipeline and return (exit code, report)."""
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    report = {"subcommand": args.subcommand, "versions": _versions()}
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        cfg.override(mode=args.mode, dt=args.dt, T=args.T, labels_per_axis=args.labels_per_axis,
                     angle_nodes=args.angle_nodes, branch=args.branch, eps=args.eps, halvings=args.halvings,
                     workers=args.workers, deterministic=args.deterministic, out=args.out)
        if args.refine:
            cfg.raw["checks"]["refine"] = True
        report["config"] = cfg.to_dict()
        cfg.out.mkdir(parents=True, exist_ok=True)
        fn = PIPELINES[args.subcommand]
        kwargs = {"bundle_paths": args.bundles} if args.subcommand == "reconstruct" else {}
        result = fn(cfg, **kwargs)
        checks, artifacts = result[0], result[1]
        extra = result[2] if len(result) > 2 else {}
    except (ConfigInvalid, DiracTrajError, OSError, ValueError) as exc:
        report.update({"error": f"{type(exc).__name__}: {exc}", "pass": False})
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if not isinstance(exc, (ConfigInvalid, OSError)):
            traceback.print_exc(file=sys.stderr)
        return EXIT_ERROR, report
    report["checks"] = checks
    report["artifacts"] = artifacts
    report.update(extra)
    report["pass"] = all(c["pass"] for c in checks if c["hard"])
    if not cfg.raw["deterministic"]:
        report["wall_time_s"] = time.perf_counter() - t0
    (cfg.out / "report.json").write_text(io.dumps_json(report) + "\n")
    for c in checks:
        tag = "PASS" if c["pass"] else ("FAIL" if c["hard"] else "info")
        print(f"[{tag}] {c['name']}: {c['value']!r} ({c['comparison']} {c['tolerance']})")
    return (EXIT_PASS if report["pass"] else EXIT_FAIL), report


def main(argv=None):
    code, _ = run(argv)
    sys.exit(code)


if __name__ == "__main__":
    main()
