"""``qfem`` command line: one subcommand per artifact, CSV on stdout or ``--out``."""
from __future__ import annotations

import argparse
import sys

from . import experiments as ex
from . import fem


def _levels(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    if not sep:
        return int(lo), int(lo)
    return int(lo), int(hi)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qfem", description=__doc__)
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--d", type=int, default=1)
        sp.add_argument("--L", type=int, default=4)
        sp.add_argument("--out", default=None, help="output CSV path (default: stdout)")
        return sp

    a = common(sub.add_parser("assemble", help="export a reference matrix as CSV"))
    a.add_argument("--matrix", choices=ex.ASSEMBLE_KINDS, default="stiffness")

    e = common(sub.add_parser("encode", help="build the C_F block encoding and summarize it"))
    e.add_argument("--path", choices=("generic", "optimized"), default="optimized")
    e.add_argument("--dump", default=None, help="write the circuit in text dump format")

    pr = common(sub.add_parser("prep", help="amplitude table of the preconditioned right-hand side"))
    pr.add_argument("--f", default="const:1", help="const:<c> or poly:<c0,c1,...>")
    pr.add_argument("--dump", default=None)

    q = common(sub.add_parser("qoi", help="quantity of interest m^T S^-1 r"))
    q.add_argument("--mode", choices=("emulation", "exact", "sampled", "noisy", "all"), default="emulation")
    q.add_argument("--tol", type=float, default=None, help="default 2^-L")
    q.add_argument("--shots", type=int, default=10_000)
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--eps2", type=_floats, default=None)
    q.add_argument("--f", default="const:1")
    q.add_argument("--phases", default=None, help="file of QSVT phases, one per line")
    q.add_argument("--path", choices=("generic", "optimized"), default="optimized")
    q.add_argument("--estimator", choices=("hadamard", "norm"), default=None)
    q.add_argument("--pool", type=int, default=256, help="noisy trajectories (mode noisy)")

    c = sub.add_parser("condition", help="solver steps vs level, with and without preconditioning")
    c.add_argument("--d", type=int, default=1)
    c.add_argument("--levels", type=_levels, default=None, help="a..b (default 3..12, or 3..6 for d=2)")
    c.add_argument("--level-cap", type=int, default=ex.D2_LEVEL_CAP, help="largest L for d=2")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out", default=None)

    n = common(sub.add_parser("noise", help="noisy QoI confidence intervals"))
    n.add_argument("--eps2", type=_floats, default=None, help="comma list (default 7e-3,3e-3,1e-3,1e-4,0)")
    n.add_argument("--J", type=_ints, default=None, help="comma list (default 2,3,4)")
    n.add_argument("--runs", type=int, default=200)
    n.add_argument("--shots", type=int, default=10_000)
    n.add_argument("--seed", type=int, default=None)
    n.add_argument("--tol", type=float, default=None, help="polynomial tolerance (default 0.1)")
    n.add_argument("--pool", type=int, default=32, help="noisy trajectories per run")
    n.add_argument("--jobs", type=int, default=1)
    return p


def config_from_args(args: argparse.Namespace) -> ex.ExperimentConfig:
    fields = ex.ExperimentConfig.__dataclass_fields__
    kw = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    return ex.ExperimentConfig(**kw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = config_from_args(args)
    if cfg.needs_seed() and cfg.seed is None:
        print(f"qfem {cfg.subcommand}: --seed is required for stochastic runs", file=sys.stderr)
        return 2
    try:
        if cfg.subcommand == "assemble":
            M = ex.assemble(cfg.d, cfg.L, args.matrix)
            if cfg.out:
                fem.write_matrix_csv(cfg.out, M)
            else:
                print(f"{M.shape[0]},{M.shape[1]}")
                for row in M:
                    print(",".join(repr(float(v)) for v in row))
        elif cfg.subcommand == "encode":
            ex.encode_table(cfg, args.dump).write(cfg.out)
        elif cfg.subcommand == "prep":
            ex.prep_table(cfg, args.dump).write(cfg.out)
        elif cfg.subcommand == "qoi":
            ex.qoi_table(cfg).write(cfg.out)
        elif cfg.subcommand == "condition":
            ex.condition_table(cfg).write(cfg.out)
        elif cfg.subcommand == "noise":
            ex.noise_table(cfg).write(cfg.out)
    except (ValueError, MemoryError) as err:
        print(f"qfem {cfg.subcommand}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
