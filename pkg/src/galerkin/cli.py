"""Command line entry point: ``galerkin <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

OUTPUTS = {
    "laplace-neumann": ["laplace-neumann.vtk"],
    "laplace-fourier": ["laplace-fourier.vtk"],
    "eigencube": ["eigencube.vtk", "eigenvalues.csv"],
    "helmholtz-sphere": ["helmholtz-sphere.vtk", "helmholtz-sphere-density.vtk"],
    "cfie-sphere": ["cfie-sphere.vtk"],
    "hmatrix-bench": ["bench.csv"],
}


def _beta(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"beta must lie in [0, 1], got {v}")
    return v


def _tol(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"tol must lie in (0, 1), got {v}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _int_list(text):
    try:
        vals = [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="output directory (created if missing)")
    common.add_argument("--force", action="store_true", help="overwrite existing output files")
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: GALERKIN_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="galerkin", description="Galerkin FEM/BEM demos and benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("laplace-neumann", parents=[common], help="-Δu + u = x² on the unit disk, Neumann, P1")
    s.add_argument("--n", type=_positive_int, default=1000, help="target vertex count")

    s = sub.add_parser("laplace-fourier", parents=[common], help="-Δu + u = 0, ∂u/∂n + u = 1 on the unit disk, P2")
    s.add_argument("--n", type=_positive_int, default=4000)

    s = sub.add_parser("eigencube", parents=[common], help="Dirichlet eigenvalues of the 1 x 1/2 x 1/2 box")
    s.add_argument("--n", type=_positive_int, default=10000)
    s.add_argument("--neig", type=_positive_int, default=10)

    s = sub.add_parser("helmholtz-sphere", parents=[common], help="sound-soft sphere, single layer, H-matrix")
    s.add_argument("--n", type=_positive_int, default=2562)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--freq", type=float, help="frequency in Hz (sound speed 340 m/s)")
    g.add_argument("--k", type=float, help="wavenumber")
    g.add_argument("--auto-k", action="store_true", help="k = 1 / longest edge (the default)")
    s.add_argument("--tol", type=_tol, default=None, help="H-matrix accuracy; dense assembly when omitted")

    s = sub.add_parser("cfie-sphere", parents=[common], help="PEC sphere, combined field equation, RWG")
    s.add_argument("--n", type=_positive_int, default=642)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--freq", type=float)
    g.add_argument("--k", type=float, help="wavenumber (default 1)")
    s.add_argument("--beta", type=_beta, default=0.5, help="1 = EFIE, 0 = MFIE (default 0.5)")
    s.add_argument("--tol", type=_tol, default=None)

    s = sub.add_parser("hmatrix-bench", parents=[common], help="assembly/regularization/solve timings")
    s.add_argument("--n", type=_int_list, default=[2562, 10242], help="comma separated sizes")
    s.add_argument("--tol", type=_tol, default=1e-3)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--fixed-freq", type=float, nargs="?", const=316.0, default=316.0,
                   help="fixed frequency in Hz (default 316)")
    g.add_argument("--scaled-freq", action="store_true", help="k = 1 / longest edge for each size")
    s.add_argument("--no-solve", action="store_true", help="time assembly and regularization only")
    return p


def _set_threads(n):
    if n is None and os.environ.get("GALERKIN_THREADS"):
        n = int(os.environ["GALERKIN_THREADS"])
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def run(args) -> int:
    from . import demos

    out: Path = args.out
    if out.exists() and not out.is_dir():
        print(f"error: --out {out} exists and is not a directory", file=sys.stderr)
        return 2
    targets = OUTPUTS[args.command] + ["report.csv", "report.txt"]
    clash = [t for t in targets if (out / t).exists()]
    if clash and not args.force:
        print(f"error: {out / clash[0]} exists; use --force to overwrite", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    _set_threads(args.threads)

    cmd = args.command
    if cmd == "laplace-neumann":
        rep, _ = demos.laplace_neumann(args.n, out=out)
    elif cmd == "laplace-fourier":
        rep, _ = demos.laplace_fourier(args.n, out=out)
    elif cmd == "eigencube":
        rep, _ = demos.eigencube(args.n, args.neig, out=out)
        import csv

        with open(out / "eigenvalues.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(rep.table_header)
            w.writerows(rep.table)
    elif cmd == "helmholtz-sphere":
        from .assembly import DenseTooLargeError

        try:
            rep, _ = demos.helmholtz_sphere(args.n, k=args.k, freq=args.freq, tol=args.tol, out=out)
        except DenseTooLargeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    elif cmd == "cfie-sphere":
        rep, _ = demos.cfie_sphere(args.n, k=args.k, freq=args.freq, beta=args.beta, tol=args.tol, out=out)
    else:
        freq = None if args.scaled_freq else args.fixed_freq
        rep = demos.hmatrix_bench(args.n, args.tol, freq, solve=not args.no_solve, out=out)
    rep.write_csv(out / "report.csv")
    rep.write_text(out / "report.txt")
    print(rep.text(), end="")
    return 0 if rep.converged else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
