"""Inverse-approximating odd polynomials and the quantity-of-interest solver.

The polynomial ``p~(z) = (1 - (1 - z^2)^K) / z`` approximates ``1/z`` away from
zero and vanishes at zero, so applying it to the singular values of
``M = Y / gamma`` with ``Y = (D_A^{1/2} x Id) C_F`` gives a pseudoinverse
without any explicit truncation.  It is expanded in odd Chebyshev polynomials
and cut after ``J + 1`` terms; ``p = scale * p~_J`` with ``scale`` chosen so that
``|p| <= 1`` on ``[-1, 1]``.

With ``m~ = F^T m`` and ``r~ = F^T r`` the quantity of interest is

    m^T S^{-1} r = <(Y^T)^+ m~, (Y^T)^+ r~>,   (Y^T)^+ v ~ p(M) v / (scale gamma).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.fft import dct
from scipy.optimize import minimize_scalar
from scipy.stats import binom

from . import encoding as enc
from . import fem, sim
from .circuit import Circuit, Gate
from .encoding import BlockEncoding, Projection
from .preconditioned import build_U_CF, build_U_CF_optimized, build_U_DA
from .stateprep import phase_flip_gates, prepare_amplitudes, prepare_in_projection

EXACT_BINOMIAL_MAX_K = 4000

# ------------------------------------------------------------- polynomial


def formula_K(kappa: float, tol: float) -> int:
    return int(np.ceil(kappa**2 * np.log(kappa / tol)))


def formula_J(K: int, tol: float) -> int:
    return int(np.ceil(np.sqrt(K * np.log(4 * K / tol))))


def tail_coefficients(K: int, J: int) -> np.ndarray:
    """c_j = 4 (-1)^j P(Bin(2K, 1/2) >= K + j + 1) for j = 0..J."""
    j = np.arange(J + 1)
    if K <= EXACT_BINOMIAL_MAX_K:
        tails = np.zeros(J + 1)
        den = 4**K
        acc = 0
        top = min(J, K - 1)
        # accumulate from the top: tail_j = sum_{k=j+1}^{K} C(2K, K+k)
        tail_vals = {}
        for jj in range(K - 1, -1, -1):
            acc += comb(2 * K, K + jj + 1)
            if jj <= top:
                tail_vals[jj] = acc
        for jj in range(top + 1):
            tails[jj] = float(Fraction(tail_vals[jj], den))
    else:
        tails = binom.sf(K + j, 2 * K, 0.5)
        tails[j >= K] = 0.0
    return 4.0 * (-1.0) ** j * tails


def eval_odd_chebyshev(coeffs: np.ndarray, z) -> np.ndarray:
    full = np.zeros(2 * len(coeffs))
    full[1::2] = coeffs
    return np.polynomial.chebyshev.chebval(np.asarray(z, dtype=float), full)


def _max_on_interval(coeffs: np.ndarray) -> float:
    """max |sum c_j T_{2j+1}| on [-1, 1]: DCT on an angle grid, then local refinement."""
    deg = 2 * len(coeffs) - 1
    n = max(10_000, 8 * deg) + 1
    x = np.zeros(n)
    x[1:2 * len(coeffs):2] = coeffs
    vals = np.abs(0.5 * dct(x, type=1))  # value at theta_k = pi k / (n - 1)
    best = float(vals.max())
    dtheta = np.pi / (n - 1)
    orders = 2 * np.arange(len(coeffs)) + 1

    def neg(theta):
        return -abs(float(coeffs @ np.cos(orders * theta)))

    # with at least 8 grid points per oscillation the grid misses a peak by < 2%
    peaks = np.nonzero((vals >= np.roll(vals, 1)) & (vals >= np.roll(vals, -1)) & (vals > 0.95 * best))[0]
    for k in peaks[np.argsort(vals[peaks])[::-1][:64]]:
        lo, hi = max(0.0, (k - 1) * dtheta), min(np.pi, (k + 1) * dtheta)
        res = minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
        best = max(best, -float(res.fun))
    return best


@dataclass
class ChebyshevPoly:
    K: int
    J: int
    coeffs: np.ndarray  # of p~ on T_{2j+1}
    scale: float
    kappa: float
    tol: float

    @property
    def degree(self) -> int:
        return 2 * self.J + 1

    @property
    def steps(self) -> int:
        return 2 * self.J + 1

    @property
    def scaled(self) -> np.ndarray:
        return self.scale * self.coeffs

    def __call__(self, z) -> np.ndarray:
        return eval_odd_chebyshev(self.scaled, z)

    def unscaled(self, z) -> np.ndarray:
        return eval_odd_chebyshev(self.coeffs, z)


def inverse_poly(kappa: float, tol: float, J: int | None = None, K: int | None = None) -> ChebyshevPoly:
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    if kappa < 1:
        raise ValueError("kappa_eff must be at least 1")
    K = formula_K(kappa, tol) if K is None else int(K)
    K = max(K, 1)
    J = formula_J(K, tol) if J is None else int(J)
    if J < 0:
        raise ValueError("J must be non-negative")
    coeffs = tail_coefficients(K, J)
    return ChebyshevPoly(K, J, coeffs, 1.0 / _max_on_interval(coeffs), float(kappa), float(tol))


def poly_error_profile(poly: ChebyshevPoly, kappa: float | None = None, n: int = 10_000) -> float:
    """sup |p(z)/scale - 1/z| over [1/kappa, 1]."""
    kappa = poly.kappa if kappa is None else kappa
    z = np.linspace(1.0 / kappa, 1.0, n)
    return float(np.abs(poly.unscaled(z) - 1.0 / z).max())


# ------------------------------------------------------- matrix recurrence

def odd_chebyshev_terms(M, v: np.ndarray, J: int):
    """Yield T_{2j+1}(M) v (singular-value sense) for j = 0..J.

    Runs the three-term recurrence on [[0, M], [M^T, 0]] applied to (0, v);
    the iterates alternate between the two blocks, so each step costs one
    product with M or M^T.  Total: 2J + 1 products.
    """
    MT = M.T
    prev = np.asarray(v, dtype=float)
    cur = M @ prev
    yield cur
    for n in range(1, 2 * J + 1):
        new = 2 * (MT @ cur if n % 2 else M @ cur) - prev
        prev, cur = cur, new
        if n % 2 == 0:
            yield cur


def apply_poly_matrix(poly: ChebyshevPoly | np.ndarray, M, v: np.ndarray) -> np.ndarray:
    """p(M) v for an odd polynomial given by its T_{2j+1} coefficients."""
    coeffs = poly.scaled if isinstance(poly, ChebyshevPoly) else np.asarray(poly)
    out = None
    for c, term in zip(coeffs, odd_chebyshev_terms(M, v, len(coeffs) - 1)):
        out = c * term if out is None else out + c * term
    return out


def apply_poly_svd(coeffs: np.ndarray, M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense reference: U p(Sigma) V^T v."""
    U, s, Vt = np.linalg.svd(np.asarray(M), full_matrices=False)
    return U @ (eval_odd_chebyshev(coeffs, s) * (Vt @ v))


# ------------------------------------------------------------------ ledger

@dataclass
class ScaleLedger:
    entries: list[tuple[str, float]] = field(default_factory=list)

    def add(self, label: str, factor: float):
        factor = float(factor)
        if not np.isfinite(factor) or factor <= 0:
            raise ValueError(f"ledger factor {label} = {factor} is not finite and positive")
        self.entries.append((label, factor))
        return self

    def product(self) -> float:
        return float(np.prod([f for _, f in self.entries])) if self.entries else 1.0

    def convert(self, raw: float) -> float:
        return raw * self.product()

    def describe(self) -> str:
        return "; ".join(f"{k}={v:.6g}" for k, v in self.entries)


# ---------------------------------------------------------------- problems

def _const_one(_p) -> float:
    return 1.0


@dataclass
class QoIProblem:
    d: int
    L: int
    coef: fem.Coefficient | None = None
    f: Callable = _const_one
    m: np.ndarray | None = None  # default h^d (1, ..., 1)

    def __post_init__(self):
        if self.coef is None:
            self.coef = fem.Coefficient.constant(self.d, self.L)

    @property
    def spec(self) -> fem.LevelSpec:
        return fem.LevelSpec(self.d, self.L)

    def r(self) -> np.ndarray:
        return fem.load_vector(self.f, self.d, self.L)

    def m_vec(self) -> np.ndarray:
        if self.m is not None:
            return np.asarray(self.m, dtype=float)
        return np.full(self.spec.n_nodes(), 2.0 ** (-self.d * self.L))

    def reference(self) -> float:
        S = fem.assemble_stiffness(self.spec, self.coef, sparse=True)
        import scipy.sparse.linalg as spla
        return float(self.m_vec() @ spla.spsolve(S.tocsc(), self.r()))


def sqrt_coefficient(coef: fem.Coefficient) -> fem.Coefficient:
    if coef.is_scalar:
        v = np.sqrt(coef.values)
        return fem.Coefficient(coef.d, coef.L, v, float(np.sqrt(coef.alpha)), float(np.sqrt(coef.beta)))
    w, V = np.linalg.eigh(coef.values)
    roots = np.einsum("nij,nj,nkj->nik", V, np.sqrt(w), V)
    return fem.Coefficient(coef.d, coef.L, roots, float(np.sqrt(coef.alpha)), float(np.sqrt(coef.beta)))


@dataclass
class LinearSystem:
    Y: sp.csr_matrix
    m_t: np.ndarray  # F^T m (or m)
    r_t: np.ndarray
    gamma: float
    preconditioned: bool


def build_system(problem: QoIProblem, preconditioned: bool = True) -> LinearSystem:
    d, L = problem.d, problem.L
    spec = problem.spec
    spec.check_size()
    half = sqrt_coefficient(problem.coef)
    D = fem.coefficient_diagonal(half, sparse=True)
    if preconditioned:
        G = fem.preconditioned_gradient(spec, sparse=True)
        F = fem.generating_system(spec, sparse=True)
        m_t, r_t = F.T @ problem.m_vec(), F.T @ problem.r()
        g0 = 2 * np.sqrt(d * L)
    else:
        G = fem.grad_factor(d, L, sparse=True)
        m_t, r_t = problem.m_vec(), problem.r()
        g0 = 2 * np.sqrt(d) * 2.0 ** (L * (2 - d) / 2)
    return LinearSystem((D @ G).tocsr(), m_t, r_t, g0 * half.beta, preconditioned)


def effective_kappa(system: LinearSystem) -> float:
    """gamma / sigma_min over the nonzero singular values of Y (dense)."""
    s = np.linalg.svd(system.Y.toarray(), compute_uv=False)
    s = s[s > 1e-10 * s[0]]
    return float(system.gamma / s[-1])


# ----------------------------------------------------------------- emulation

@dataclass
class QoIResult:
    mode: str
    estimate: float
    reference: float
    ledger: ScaleLedger
    info: dict = field(default_factory=dict)

    @property
    def rel_error(self) -> float:
        return abs(self.estimate - self.reference) / abs(self.reference)


def _emulate(system: LinearSystem, coeffs: np.ndarray, estimator: str):
    M = system.Y / system.gamma
    nm, nr = np.linalg.norm(system.m_t), np.linalg.norm(system.r_t)
    xr = apply_poly_matrix(coeffs, M, system.r_t / nr)
    ledger = ScaleLedger()
    if estimator == "hadamard":
        xm = apply_poly_matrix(coeffs, M, system.m_t / nm)
        raw = float(xm @ xr)
        ledger.add("|F^T m|", nm).add("|F^T r|", nr).add("1/gamma^2", system.gamma**-2)
        return raw, ledger
    if estimator == "norm":
        if not np.allclose(system.m_t / nm, system.r_t / nr):
            raise ValueError("the norm estimator needs m parallel to r")
        xhat = xr / np.linalg.norm(xr)
        pb = float(np.linalg.norm(M.T @ xhat) ** 2)
        ledger.add("|F^T r|^2", nr**2).add("1/gamma^2", system.gamma**-2).add("|F^T m|/|F^T r|", nm / nr)
        return 1.0 / pb, ledger
    raise ValueError(f"unknown estimator {estimator}")


def emulate_qoi(problem: QoIProblem, poly: ChebyshevPoly, preconditioned: bool = True,
                estimator: str = "hadamard", system: LinearSystem | None = None) -> QoIResult:
    system = build_system(problem, preconditioned) if system is None else system
    raw, ledger = _emulate(system, poly.coeffs, estimator)
    res = QoIResult("emulation", ledger.convert(raw), problem.reference(), ledger)
    res.info.update(K=poly.K, J=poly.J, kappa=poly.kappa, steps=poly.steps, estimator=estimator)
    return res


def qoi_partial_sums(system: LinearSystem, coeffs: np.ndarray) -> np.ndarray:
    """Hadamard-estimator QoI for every truncation J' = 0..J in one recurrence pass."""
    M = system.Y / system.gamma
    nm, nr = np.linalg.norm(system.m_t), np.linalg.norm(system.r_t)
    same = np.allclose(system.m_t / nm, system.r_t / nr)
    J = len(coeffs) - 1
    fac = nm * nr / system.gamma**2
    out = np.zeros(J + 1)
    xr = np.zeros(M.shape[0])
    xm = xr.copy()
    gen_r = odd_chebyshev_terms(M, system.r_t / nr, J)
    gen_m = None if same else odd_chebyshev_terms(M, system.m_t / nm, J)
    for j in range(J + 1):
        xr = xr + coeffs[j] * next(gen_r)
        if gen_m is not None:
            xm = xm + coeffs[j] * next(gen_m)
            out[j] = fac * float(xm @ xr)
        else:
            out[j] = fac * float(xr @ xr)
    return out


@dataclass
class SearchResult:
    J: int
    kappa: float
    K: int
    steps: int
    rel_error: float


def _min_J(system, kappa, tol, ref) -> tuple[int, float] | None:
    """First truncation after which every partial sum up to the formula J stays within tol."""
    K = formula_K(kappa, tol)
    J_cap = min(formula_J(K, tol), K - 1) if K > 1 else 0
    vals = qoi_partial_sums(system, tail_coefficients(K, J_cap))
    err = np.abs(vals - ref) / abs(ref)
    bad = np.nonzero(err > tol)[0]
    j = 0 if len(bad) == 0 else int(bad[-1]) + 1
    if j > J_cap:
        return None
    return j, float(err[j])


def kappa_eff_search(problem: QoIProblem, tol: float | None = None, preconditioned: bool = True,
                     grid: int = 8, kappa0: float = 1.25, kappa_max: float = 1e6) -> SearchResult:
    """Smallest solver step count over kappa_eff with emulation error <= tol.

    kappa_eff is doubled from ``kappa0`` until some truncation J meets the
    tolerance, then refined on a geometric grid below that point; for each
    kappa_eff the minimal J is read off one recurrence pass that records the
    error of every partial sum.
    """
    tol = 2.0 ** (-problem.L) if tol is None else tol
    system = build_system(problem, preconditioned)
    ref = problem.reference()
    kappa, hit = kappa0, None
    while kappa <= kappa_max:
        hit = _min_J(system, kappa, tol, ref)
        if hit is not None:
            break
        kappa *= 2
    if hit is None:
        raise RuntimeError("no kappa_eff up to the cap meets the tolerance")
    best = SearchResult(hit[0], kappa, formula_K(kappa, tol), 2 * hit[0] + 1, hit[1])
    for k in np.geomspace(kappa / 2, kappa, grid + 1)[:-1]:
        if k < 1:
            continue
        h = _min_J(system, float(k), tol, ref)
        if h is not None and 2 * h[0] + 1 < best.steps:
            best = SearchResult(h[0], float(k), formula_K(float(k), tol), 2 * h[0] + 1, h[1])
    return best


# ----------------------------------------------------------- circuit path

def build_U_Y(problem: QoIProblem, path: str = "optimized") -> BlockEncoding:
    """(D_A^{1/2} x Id) C_F; a constant coefficient only rescales gamma."""
    if problem.coef.is_scalar and np.allclose(problem.coef.values, problem.coef.values[0]):
        base = build_U_CF_optimized(problem.d, problem.L) if path == "optimized" else build_U_CF(problem.d, problem.L)
        return enc.scale(base, float(np.sqrt(problem.coef.values[0])))
    CF = build_U_CF_optimized(problem.d, problem.L) if path == "optimized" else build_U_CF(problem.d, problem.L)
    return enc.multiply(build_U_DA(sqrt_coefficient(problem.coef)), CF)


def _ge_terms(qubits, value: int) -> list[dict[int, int]]:
    """Disjoint conditions for register value >= ``value``."""
    n = len(qubits)
    if value <= 0:
        return [{}]
    if value >= 2**n:
        return []
    terms = []
    for i in reversed(range(n)):
        if not (value >> i) & 1:
            cond = {qubits[j]: (value >> j) & 1 for j in range(i + 1, n)}
            cond[qubits[i]] = 1
            terms.append(cond)
    terms.append({qubits[j]: (value >> j) & 1 for j in range(n)})
    return terms


@dataclass
class PolyCircuit:
    encoding: BlockEncoding  # encodes p(M) / lambda, gamma = lambda
    base: BlockEncoding
    lam: float
    sel: tuple[int, ...]
    extra: tuple[int, ...]


def lcu_poly_circuit(U: BlockEncoding, coeffs: np.ndarray) -> PolyCircuit:
    """sum_j c_j T_{2j+1}(A/gamma) by a selector over alternating products.

    Pi_2 U (R_1 U^dag R_2 U)^j Pi_1^dag = T_{2j+1}(A / gamma) with reflections
    R = I - 2 Pi; the j-th factor fires when the selector is >= j.  Only the
    reflections are controlled, since U^dag U cancels otherwise.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    J = len(coeffs) - 1
    n0 = U.n_qubits
    ns = int(np.ceil(np.log2(J + 1))) if J > 0 else 0
    sel = tuple(range(n0, n0 + ns))
    cmp_q = n0 + ns
    n = n0 + ns + (1 if J > 0 else 0)
    c = Circuit(n)
    c.registers.update(U.circuit.registers)
    c.registers["sel"] = sel
    lam = float(np.abs(coeffs).sum())
    weights = np.abs(coeffs) / lam
    prep = _prep_gates(weights, sel)
    c.extend(prep)
    for j in np.nonzero(coeffs < 0)[0]:
        c.extend(phase_flip_gates(enc._sel_controls(sel, int(j))))
    base_q = range(n0)
    c.extend(U.circuit.gates)
    inv = U.circuit.inverse().gates
    for i in range(1, J + 1):
        c.registers["cmp"] = (cmp_q,)
        flip = [Gate("X", (cmp_q,), tuple(t), tuple(t.values())) for t in _ge_terms(sel, i)]
        c.extend(flip)
        c.extend(enc.reflection(U.proj_out, base_q, {cmp_q: 1}))
        c.extend(inv)
        c.extend(enc.reflection(U.proj_in, base_q, {cmp_q: 1}))
        c.extend(U.circuit.gates)
        c.extend(flip)
    c.extend(g.inverse() for g in reversed(prep))
    E = BlockEncoding(c, lam, U.proj_in, U.proj_out, None, None, "p(U)")
    return PolyCircuit(E, U, lam, sel, (cmp_q,) if J > 0 else ())


def _prep_gates(weights: np.ndarray, sel: tuple[int, ...]) -> list[Gate]:
    if not sel:
        return []
    v = np.zeros(2 ** len(sel))
    v[: len(weights)] = np.sqrt(weights)
    return prepare_amplitudes(v, list(reversed(sel)))


def read_phases(path) -> np.ndarray:
    with open(path) as fh:
        vals = [float(ln) for ln in fh if ln.strip()]
    if len(vals) % 2 == 0:
        raise ValueError("an odd polynomial needs an odd number of phases")
    return np.array(vals)


def qsvt_poly_values(phases: np.ndarray, z) -> np.ndarray:
    """Re P_Phi(z) in the convention of ``qsvt_circuit``.

    On the two-dimensional subspace of singular value z, U acts as the
    reflection W = [[z, s], [s, -z]] and a projector phase as
    diag(e^{i phi}, e^{-i phi}); the first phase acts last.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return np.array([_qsvt_entry(phases, x) for x in z])


def _qsvt_entry(phases: np.ndarray, x: float) -> float:
    s = np.sqrt(max(0.0, 1 - x * x))
    W = np.array([[x, s], [s, -x]], dtype=complex)
    M = np.eye(2, dtype=complex)
    for ph in reversed(phases):
        M = np.diag([np.exp(1j * ph), np.exp(-1j * ph)]) @ W @ M
    return float(M[0, 0].real)


def qsvt_circuit(U: BlockEncoding, phases: np.ndarray) -> PolyCircuit:
    """Re P_Phi(A/gamma) for an odd number of phases.

    Sequence: U, then for the remaining phases alternately a projector phase
    e^{i phi (2 Pi - I)} and U^dag or U.  The projector phase is CNOT_Pi onto a
    flag, Rz on the flag and CNOT_Pi again.  A Hadamard qubit runs Phi and -Phi
    in superposition so that its |0> branch carries the real part.
    """
    phases = np.asarray(phases, dtype=float)
    d = len(phases)
    if d % 2 == 0:
        raise ValueError("odd number of phases required")
    n0 = U.n_qubits
    flag, had = n0, n0 + 1
    c = Circuit(n0 + 2)
    c.registers.update(U.circuit.registers)
    c.registers.update(flag=(flag,), had=(had,))
    base_q = range(n0)
    inv = U.circuit.inverse().gates

    def proj_phase(proj: Projection, phi: float):
        cn = enc.cnot_pi(proj, base_q, flag)
        c.extend(cn)
        c.append("RZ", flag, controls=had, ctrl_state=(0,), param=2 * phi)
        c.append("RZ", flag, controls=had, ctrl_state=(1,), param=-2 * phi)
        c.extend(cn)

    c.append("H", had)
    # operator: R_1 U R_2 U^dag R_3 U ... R_d U  (rightmost first)
    for k in range(d):
        step = d - 1 - k
        if k % 2 == 0:
            c.extend(U.circuit.gates)
            proj_phase(U.proj_out, phases[step])
        else:
            c.extend(inv)
            proj_phase(U.proj_in, phases[step])
    c.append("H", had)
    E = BlockEncoding(c, 1.0, U.proj_in, U.proj_out, None, None, "ReP_Phi(U)")
    return PolyCircuit(E, U, 1.0, (), (flag, had))


def _poly_scale_from_phases(phases: np.ndarray, kappa: float) -> float:
    z = np.linspace(1.0 / kappa, 1.0, 2001)
    return float(np.mean(qsvt_poly_values(phases, z) * z))


# ----------------------------------------------------------- estimators

def _prep_on(U: BlockEncoding, vec: np.ndarray, n: int) -> Circuit:
    lay = U.info.get("layout")
    first = list(reversed(lay.lvl)) if lay is not None else []
    return prepare_in_projection(vec, U.proj_in, n, first_qubits=first).circuit


def _success_mask(proj_out: Projection, n: int, zero_qubits=()) -> np.ndarray:
    idx = np.arange(2**n, dtype=np.int64)
    ok = proj_out.member(idx)
    for q in zero_qubits:
        ok &= ((idx >> q) & 1) == 0
    return ok


@dataclass
class HadamardCircuit:
    circuit: Circuit
    success: np.ndarray  # mask of basis states with all flags good
    cbit: int
    poly: PolyCircuit


def hadamard_circuit(problem: QoIProblem, poly: PolyCircuit, m_t: np.ndarray, r_t: np.ndarray) -> HadamardCircuit:
    """|+>|m^> / |r^> stack, p(M) on both branches, H on the stack qubit."""
    P = poly.encoding
    n0 = P.n_qubits
    cbit = n0
    c = Circuit(n0 + 1)
    c.registers.update(P.circuit.registers)
    c.registers["c"] = (cbit,)
    c.append("H", cbit)
    pm = _prep_on(poly.base, m_t, n0)
    pr = _prep_on(poly.base, r_t, n0)
    c.extend(enc._controlled_gates(pm.gates, {cbit: 0}))
    c.extend(enc._controlled_gates(pr.gates, {cbit: 1}))
    c.extend(P.circuit.gates)
    c.append("H", cbit)
    zero = list(poly.sel) + list(poly.extra)
    mask = _success_mask(P.proj_out, n0 + 1, zero)
    return HadamardCircuit(c, mask, cbit, poly)


def _hadamard_diff(probs: np.ndarray, hc: HadamardCircuit) -> float:
    idx = np.arange(len(probs))
    cb = (idx >> hc.cbit) & 1
    return float(probs[hc.success & (cb == 0)].sum() - probs[hc.success & (cb == 1)].sum())


@dataclass
class NormCircuits:
    stage1: Circuit
    stage2: Circuit
    success1: np.ndarray
    success2: np.ndarray
    poly: PolyCircuit


def norm_circuits(poly: PolyCircuit, r_t: np.ndarray) -> NormCircuits:
    """Stage 1 prepares p(M)|r^>; stage 2 applies U^dag to the postselected state."""
    P = poly.encoding
    n = P.n_qubits
    s1 = _prep_on(poly.base, r_t, n)
    s1.extend(P.circuit.gates)
    s2 = Circuit(n)
    s2.extend(poly.base.circuit.inverse().gates)
    zero = list(poly.sel) + list(poly.extra)
    ok1 = _success_mask(P.proj_out, n, zero)
    ok2 = _success_mask(P.proj_in, n, zero)
    return NormCircuits(s1, s2, ok1, ok2, poly)


def norm_estimate_exact(nc: NormCircuits) -> tuple[float, float]:
    """(P_a, P_b): stage-1 success and stage-2 success given stage 1."""
    st = sim.simulate(nc.stage1)
    pa = float((np.abs(st[nc.success1]) ** 2).sum())
    post = np.where(nc.success1, st, 0) / np.sqrt(pa)
    out = sim.simulate(nc.stage2, post)
    pb = float((np.abs(out[nc.success2]) ** 2).sum())
    return pa, pb


class NoisyNormSampler:
    """Noisy trajectories of the two-stage norm estimate.

    One trajectory is a noisy run of stage 1 (giving P_a and the postselected
    state) followed by a noisy run of stage 2 (giving P_b).  Shots are spread
    uniformly over a pool of trajectories and succeed in stage 1 and stage 2
    with that trajectory's probabilities.
    """

    def __init__(self, nc: NormCircuits, noise: sim.NoiseModel):
        self.nc = nc
        self.noise = noise
        self.r1 = sim.TrajectoryRunner(nc.stage1, noise)
        self._clean2 = None

    def trajectory(self, rng: np.random.Generator) -> tuple[float, float]:
        nc = self.nc
        st = self.r1.run(rng)
        pa = float((np.abs(st[nc.success1]) ** 2).sum())
        if pa <= 0:
            return 0.0, 0.0
        post = np.where(nc.success1, st, 0) / np.sqrt(pa)
        if np.array_equal(st, self.r1.final):
            # error-free stage 1: one prefix cache serves every such trajectory
            if self._clean2 is None:
                self._clean2 = sim.TrajectoryRunner(nc.stage2, self.noise, post)
            runner = self._clean2
        else:
            runner = sim.TrajectoryRunner(nc.stage2, self.noise, post, cache=False)
        out = runner.run(rng)
        return pa, float((np.abs(out[nc.success2]) ** 2).sum())

    def pool(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        pa, pb = zip(*(self.trajectory(rng) for _ in range(size)))
        return np.array(pa), np.array(pb)

    @staticmethod
    def shots(pa: np.ndarray, pb: np.ndarray, shots: int, rng: np.random.Generator) -> tuple[int, int]:
        """(stage-1 successes, stage-2 successes) for one batch of shots."""
        per = rng.multinomial(shots, np.full(len(pa), 1.0 / len(pa)))
        a = rng.binomial(per, pa)
        b = rng.binomial(a, pb)
        return int(a.sum()), int(b.sum())


def qoi_pipeline(problem: QoIProblem, mode: str = "emulation", tol: float = 0.1, kappa: float | None = None,
                 J: int | None = None, K: int | None = None, shots: int = 10_000, seed: int = 0,
                 eps2: float = 0.0, estimator: str = "hadamard", path: str = "optimized",
                 phases: np.ndarray | None = None, pool: int = 64) -> QoIResult:
    """Quantity of interest m^T S^{-1} r by the preconditioned pseudoinverse polynomial.

    Modes: ``emulation`` (dense recurrence), ``exact`` (statevector of the full
    circuit), ``sampled`` (shots from the exact distribution) and ``noisy``
    (trajectory noise with two-qubit error ``eps2``).
    """
    system = build_system(problem, True)
    if kappa is None:
        kappa = effective_kappa(system)
    poly = inverse_poly(kappa, tol, J=J, K=K)
    ref = problem.reference()
    if mode == "emulation":
        coeffs = poly.coeffs
        res = QoIResult(mode, 0.0, ref, ScaleLedger())
        raw, ledger = _emulate(system, coeffs, estimator)
        res.estimate, res.ledger = ledger.convert(raw), ledger
        res.info.update(K=poly.K, J=poly.J, kappa=kappa, steps=poly.steps, estimator=estimator)
        return res
    if mode not in ("exact", "sampled", "noisy"):
        raise ValueError(f"unknown mode {mode}")
    U = build_U_Y(problem, path)
    if U.subnorm_bound is None:
        raise ValueError("encoding has no subnormalization bound; supply a norm hint first")
    if phases is not None:
        pc = qsvt_circuit(U, phases)
        pscale = _poly_scale_from_phases(phases, kappa)
    else:
        pc = lcu_poly_circuit(U, poly.scaled)
        pscale = poly.scale
    nm, nr = np.linalg.norm(system.m_t), np.linalg.norm(system.r_t)
    rng = np.random.default_rng(seed)
    ledger = ScaleLedger()
    info = dict(K=poly.K, J=poly.J, kappa=kappa, steps=poly.steps, estimator=estimator,
                qubits=pc.encoding.n_qubits, two_qubit=pc.encoding.circuit.stats()["two_qubit"],
                lam=pc.lam, gamma=U.gamma)
    if estimator == "hadamard":
        hc = hadamard_circuit(problem, pc, system.m_t, system.r_t)
        info.update(qubits=hc.circuit.n_qubits, two_qubit=hc.circuit.stats()["two_qubit"])
        if mode == "noisy":
            counts = sim.simulate_noisy(hc.circuit, sim.NoiseModel(eps2), shots, seed, trajectories=pool)
            probs = _counts_to_probs(counts, hc.circuit.n_qubits)
        else:
            probs = np.abs(sim.simulate(hc.circuit)) ** 2
            if mode == "sampled":
                probs = _counts_to_probs(sim.sample_counts(probs, shots, rng), hc.circuit.n_qubits)
        raw = _hadamard_diff(probs, hc)
        ledger.add("|F^T m|", nm).add("|F^T r|", nr).add("lambda^2", pc.lam**2)
        ledger.add("1/(scale gamma)^2", (pscale * U.gamma) ** -2)
        info["raw"] = raw
        return QoIResult(mode, ledger.convert(raw), ref, ledger, info)
    if estimator != "norm":
        raise ValueError(f"unknown estimator {estimator}")
    if not np.allclose(system.m_t / nm, system.r_t / nr):
        raise ValueError("the norm estimator needs m parallel to r")
    nc = norm_circuits(pc, system.r_t)
    if mode == "noisy":
        sampler = NoisyNormSampler(nc, sim.NoiseModel(eps2))
        pa, pb = sampler.pool(pool, rng)
        a, b = sampler.shots(pa, pb, shots, rng)
        pb = b / a if a else np.nan
        info.update(stage1=a, stage2=b)
    else:
        pa, pb = norm_estimate_exact(nc)
        info["P_a"] = pa
        if mode == "sampled":
            a = rng.binomial(shots, pa)
            b = rng.binomial(a, pb)
            pb = b / a if a else np.nan
            info.update(stage1=a, stage2=b)
    info["P_b"] = pb
    ledger.add("|F^T r|^2", nr**2).add("1/gamma^2", U.gamma**-2).add("|F^T m|/|F^T r|", nm / nr)
    est = ledger.convert(1.0 / pb) if pb and np.isfinite(pb) else np.nan
    return QoIResult(mode, est, ref, ledger, info)


def _counts_to_probs(counts: dict[int, int], n: int) -> np.ndarray:
    p = np.zeros(2**n)
    tot = sum(counts.values())
    for k, v in counts.items():
        p[k] = v / tot
    return p
