"""Experiment drivers behind the ``qfem`` command line.

Every driver returns an :class:`Table` (metadata plus rows) and never touches
global random state, so a CSV is fully determined by its config and seed.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, fem
from . import solver as S
from .preconditioned import build_U_CF, build_U_CF_optimized
from .stateprep import frame_rhs, parse_rhs, prepare_in_projection

NOISE_EPS2 = (7e-3, 3e-3, 1e-3, 1e-4, 0.0)
NOISE_J = (2, 3, 4)
D2_LEVEL_CAP = 6
CIRCUIT_LEVEL_CAP = 4


@dataclass
class ExperimentConfig:
    subcommand: str
    d: int = 1
    L: int = 4
    levels: tuple[int, int] | None = None
    tol: float | None = None
    mode: str = "emulation"
    shots: int = 10_000
    seed: int | None = None
    eps2: tuple[float, ...] | None = None
    runs: int = 200
    f: str = "const:1"
    phases: str | None = None
    out: str | None = None
    path: str = "optimized"
    estimator: str | None = None
    J: tuple[int, ...] | None = None
    pool: int = 32
    level_cap: int = D2_LEVEL_CAP
    jobs: int = 1

    def needs_seed(self) -> bool:
        if self.subcommand == "noise":
            return True
        return self.subcommand == "qoi" and self.mode in ("sampled", "noisy", "all")


@dataclass
class Table:
    header: list[str]
    rows: list[tuple] = field(default_factory=list)
    meta: list[tuple[str, str]] = field(default_factory=list)

    def render(self) -> str:
        lines = [f"# {k}={v}" for k, v in self.meta]
        lines.append(",".join(self.header))
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def write(self, path: str | None):
        text = self.render()
        if path is None or path == "-":
            print(text, end="")
            return
        with open(path, "w") as fh:
            fh.write(text)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


RELEVANT = {
    "assemble": ("d", "L"),
    "encode": ("d", "L", "path"),
    "prep": ("d", "L", "f"),
    "qoi": ("d", "L", "tol", "mode", "shots", "seed", "eps2", "f", "phases", "path", "estimator", "pool"),
    "condition": ("d", "levels", "level_cap"),
    "noise": ("d", "L", "tol", "shots", "seed", "eps2", "runs", "J", "pool"),
}


def _base_meta(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    keys = RELEVANT.get(cfg.subcommand, ())
    keep = {k: v for k, v in asdict(cfg).items() if k in keys and v is not None}
    return [("version", __version__), ("subcommand", cfg.subcommand)] + [(k, _fmt_meta(v)) for k, v in sorted(keep.items())]


def _fmt_meta(v) -> str:
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return _fmt(v)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, os.cpu_count() or 1)) as pool:
        return list(pool.map(fn, items))


def _problem(cfg: ExperimentConfig, L: int | None = None) -> S.QoIProblem:
    return S.QoIProblem(cfg.d, cfg.L if L is None else L, f=parse_rhs(cfg.f))


# ------------------------------------------------------------- assemble

ASSEMBLE_KINDS = ("stiffness", "galerkin", "gradient", "frame", "cf", "system")


def assemble(d: int, L: int, kind: str = "stiffness") -> np.ndarray:
    spec = fem.LevelSpec(d, L)
    spec.check_size()
    if kind == "stiffness":
        return fem.assemble_stiffness(spec)
    if kind == "galerkin":
        return fem.assemble_stiffness_galerkin(spec)
    if kind == "gradient":
        return fem.grad_factor(d, L)
    if kind == "frame":
        return fem.generating_system(spec)
    if kind == "cf":
        return fem.preconditioned_gradient(spec)
    if kind == "system":
        return fem.preconditioned_system(spec)
    raise ValueError(f"unknown matrix kind '{kind}'")


# --------------------------------------------------------------- encode

def encode_table(cfg: ExperimentConfig, dump: str | None = None) -> Table:
    build = build_U_CF_optimized if cfg.path == "optimized" else build_U_CF
    U = build(cfg.d, cfg.L)
    st = U.circuit.stats()
    t = Table(["key", "value"], meta=_base_meta(cfg))
    t.rows += [("path", cfg.path), ("qubits", U.n_qubits), ("gates", st["gates"]),
               ("two_qubit", st["two_qubit"]), ("gamma", U.gamma), ("subnorm_bound", U.subnorm_bound)]
    if U.n_qubits <= 16:
        from .encoding import extract_matrix
        dense = fem.preconditioned_gradient(fem.LevelSpec(cfg.d, cfg.L))
        err = np.abs(extract_matrix(U) - dense).max()
        t.rows.append(("max_abs_error_vs_dense", err))
    if dump:
        from .circuit import dumps
        with open(dump, "w") as fh:
            fh.write(dumps(U.circuit))
    return t


# ----------------------------------------------------------------- prep

def prep_table(cfg: ExperimentConfig, dump: str | None = None) -> Table:
    """Amplitude table (k, x, g_k) of the normalized frame right-hand side."""
    U = build_U_CF_optimized(cfg.d, cfg.L)
    vec = frame_rhs(parse_rhs(cfg.f), cfg.d, cfg.L)
    lay = U.info["layout"]
    ps = prepare_in_projection(vec, U.proj_in, U.n_qubits, first_qubits=list(reversed(lay.lvl)))
    t = Table(["k", "x", "g_k"], meta=_base_meta(cfg) + [("norm", _fmt(ps.norm)),
                                                         ("qubit_order", " ".join(map(str, ps.qubits)))])
    t.rows = list(ps.table.rows())
    if dump:
        from .circuit import dumps
        with open(dump, "w") as fh:
            fh.write(dumps(ps.circuit))
    return t


# ------------------------------------------------------------ condition

def _condition_point(args) -> tuple:
    d, L, method = args
    res = S.kappa_eff_search(S.QoIProblem(d, L), 2.0 ** (-L), preconditioned=(method == "bpx"))
    return (L, d, method, res.steps, res.rel_error)


def condition_table(cfg: ExperimentConfig) -> Table:
    lo, hi = cfg.levels or (3, 12 if cfg.d == 1 else D2_LEVEL_CAP)
    meta = _base_meta(cfg) + [("tol_rule", "2^-L"), ("steps", "2J+1 recurrence matrix applications")]
    if cfg.d == 2 and hi > cfg.level_cap:
        meta.append(("warning", f"d=2 range truncated from L={hi} to L={cfg.level_cap} (dense emulation cap)"))
        hi = cfg.level_cap
    points = [(cfg.d, L, m) for L in range(lo, hi + 1) for m in ("bpx", "none")]
    rows = _map(_condition_point, points, cfg.jobs)
    return Table(["L", "d", "method", "steps", "rel_error"], sorted(rows), meta)


# ------------------------------------------------------------------ qoi

def qoi_table(cfg: ExperimentConfig) -> Table:
    pr = _problem(cfg)
    tol = 2.0 ** (-cfg.L) if cfg.tol is None else cfg.tol
    modes = [cfg.mode]
    if cfg.mode == "all":
        modes = ["emulation"] + (["exact", "sampled"] if cfg.d == 1 and cfg.L <= CIRCUIT_LEVEL_CAP else [])
    phases = S.read_phases(cfg.phases) if cfg.phases else None
    estimator = cfg.estimator or "hadamard"
    meta = _base_meta(cfg) + [("tol_used", _fmt(tol))]
    t = Table(["mode", "estimate", "reference", "rel_error", "ledger"], meta=meta)
    for mode in modes:
        eps = cfg.eps2[0] if cfg.eps2 else 0.0
        res = S.qoi_pipeline(pr, mode, tol=tol, shots=cfg.shots, seed=cfg.seed or 0, eps2=eps,
                             estimator=estimator, path=cfg.path, phases=phases, pool=cfg.pool)
        t.rows.append((mode, res.estimate, res.reference, res.rel_error, res.ledger.product()))
        t.meta.append((f"{mode}_poly", f"K={res.info['K']} J={res.info['J']} kappa={res.info['kappa']!r}"))
        t.meta.append((f"{mode}_ledger", res.ledger.describe()))
    return t


# ---------------------------------------------------------------- noise

@dataclass
class NoisePoint:
    eps2: float
    J: int
    estimates: np.ndarray
    dropped: int

    def summary(self) -> tuple:
        est = self.estimates
        mean = float(est.mean())
        half = 1.96 * float(est.std(ddof=1)) / np.sqrt(len(est)) if len(est) > 1 else float("nan")
        return (self.eps2, self.J, mean, mean - half, mean + half)


def _noise_point(args) -> NoisePoint:
    d, L, eps2, J, runs, shots, pool, seed, tol = args
    pr = S.QoIProblem(d, L)
    system = S.build_system(pr, True)
    poly = S.inverse_poly(S.effective_kappa(system), tol, J=J)
    U = S.build_U_Y(pr, "optimized")
    nc = S.norm_circuits(S.lcu_poly_circuit(U, poly.scaled), system.r_t)
    sampler = S.NoisyNormSampler(nc, S.sim.NoiseModel(eps2))
    # one stream per (eps2, J) point, independent of evaluation order
    rng = np.random.default_rng(np.random.SeedSequence([seed, J, int(round(eps2 * 1e9))]))
    nm, nr = np.linalg.norm(system.m_t), np.linalg.norm(system.r_t)
    factor = nr**2 / U.gamma**2 * (nm / nr)
    est = []
    for _ in range(runs):
        # every run draws its own trajectories, so the spread covers noise realizations too
        pa, pb = sampler.pool(pool if eps2 > 0 else 1, rng)
        a, b = sampler.shots(pa, pb, shots, rng)
        if b > 0:
            est.append(factor * a / b)
    return NoisePoint(eps2, J, np.array(est), runs - len(est))


def noise_points(cfg: ExperimentConfig) -> list[NoisePoint]:
    eps = cfg.eps2 or NOISE_EPS2
    Js = cfg.J or NOISE_J
    tol = 0.1 if cfg.tol is None else cfg.tol
    args = [(cfg.d, cfg.L, e, J, cfg.runs, cfg.shots, cfg.pool, cfg.seed, tol) for e in eps for J in Js]
    return _map(_noise_point, args, cfg.jobs)


def noise_table(cfg: ExperimentConfig, points: list[NoisePoint] | None = None) -> Table:
    if cfg.d != 1:
        raise ValueError("the noise experiment runs the full circuit and supports d=1 only")
    points = noise_points(cfg) if points is None else points
    pr = S.QoIProblem(cfg.d, cfg.L)
    meta = _base_meta(cfg) + [("reference", _fmt(pr.reference())), ("estimator", "norm"),
                              ("ci", "mean +- 1.96 sd/sqrt(valid runs)"), ("trajectories_per_run", str(cfg.pool))]
    for p in points:
        if p.dropped:
            meta.append((f"dropped_runs eps2={_fmt(p.eps2)} J={p.J}", str(p.dropped)))
    rows = sorted((p.summary() for p in points), key=lambda r: (-r[0], r[1]))
    return Table(["eps2", "J", "mean", "ci_low", "ci_high"], rows, meta)
