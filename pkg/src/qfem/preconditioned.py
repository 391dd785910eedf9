"""Block encodings of the multilevel gradient C_F, the coefficient and S.

One dimension, level ``l``: nodal values ``v`` on ``l`` qubits are spread onto
(cell, t) by a Hadamard on ``t`` and an increment controlled on ``t``, which
realizes the stack of right-endpoint (t = 0) and left-endpoint (t = 1) values.
A 2x2 local matrix then acts on ``t`` through a dilation with one ancilla.

Cell indices live in an "aligned" work register of ``L`` qubits: a level-l
index occupies the top ``l`` bits, so refining a cell writes the child bit just
below them and the transfer to the finest level never moves data.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import ceil, log2

import numpy as np

from . import encoding as enc
from . import fem
from .circuit import Circuit, Gate
from .encoding import BlockEncoding, Branch, Projection
from .stateprep import _uniform_ry, prepare_amplitudes


class NonScalarCoefficient(ValueError):
    """Matrix-valued coefficients have no circuit here; use the emulation path."""


def _qr_completion(V: np.ndarray) -> np.ndarray:
    """Unitary whose leading columns are the orthonormal columns of V."""
    n, k = V.shape
    Q, _ = np.linalg.qr(np.hstack([V, np.eye(n)]))
    Q = Q[:, :n]
    # fix signs so that the first k columns are exactly V
    for j in range(k):
        if np.dot(Q[:, j], V[:, j]) < 0:
            Q[:, j] *= -1
    if not np.allclose(Q[:, :k], V, atol=1e-12):
        raise ValueError("columns are not orthonormal")
    return Q


def n_sel(count: int) -> int:
    return ceil(log2(count)) if count > 1 else 0


# ---------------------------------------------------------------- 1D pieces

LOCAL_R = np.sqrt(2) * fem.B_R
LOCAL_C = fem.B_C / np.sqrt(2)
DIL_R = enc.dilation(LOCAL_R)
DIL_C = enc.dilation(LOCAL_C)
T_GATE = _qr_completion(fem.T_LOCAL)


def gamma_1d(kind: str, level: int) -> float:
    return 2.0 ** (-level / 2) if kind == "R" else 2.0 ** (level / 2 + 1)


def _toeplitz_eigs(M: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric tridiagonal Toeplitz matrix (sine modes)."""
    n = M.shape[0]
    a = M[0, 0]
    b = M[0, 1] if n > 1 else 0.0
    k = np.arange(1, n + 1)
    return a + 2 * b * np.cos(k * np.pi / (n + 1))


def grad_norm(d: int, level: int) -> float:
    """Exact |C_l| from the shared sine eigenbasis of R^T R and C^T C."""
    R, C = fem.R1d(level), fem.C1d(level)
    lr, lc = _toeplitz_eigs(R.T @ R), _toeplitz_eigs(C.T @ C)
    grids = np.meshgrid(*([np.arange(len(lr))] * d), indexing="ij")
    tot = np.zeros(grids[0].shape)
    for s in range(d):
        term = np.ones_like(tot)
        for i, g in enumerate(grids):
            term = term * (lc[g] if i == s else lr[g])
        tot += term
    return float(np.sqrt(tot.max()))


def build_1d(kind: str, level: int) -> BlockEncoding:
    """R_l or C_l in one dimension; qubits x (l), t, b."""
    x = tuple(range(level))
    t, b = level, level + 1
    c = Circuit(level + 2)
    c.registers.update(x=x, t=(t,), b=(b,))
    c.append("H", t)
    if level:
        c.append("INC", x, controls=t, param=1)
    c.append("U", (t, b), matrix=DIL_R if kind == "R" else DIL_C)
    M = fem.R1d(level) if kind == "R" else fem.C1d(level)
    g = gamma_1d(kind, level)
    sv = np.linalg.svd(M, compute_uv=False)
    return BlockEncoding(
        c, g, Projection.single((x, 2**level - 1)), Projection.single((x, 2**level), ((t,), 2)),
        g / sv[0], sv[0] / sv[-1], f"{kind}{level}",
    )


def _group(E: BlockEncoding, d: int) -> BlockEncoding:
    """(x1, t1, x2, t2, ...) -> (x1, .., xd, t1, .., td) on the output side."""
    if d == 1:
        return E
    return enc.reorder(E, out_order=[2 * i for i in range(d)] + [2 * i + 1 for i in range(d)])


def build_U_grad(d: int, level: int) -> BlockEncoding:
    """C_l with rows |j>|s>|k>: vstack over s of R x .. x C (at s) x .. x R."""
    blocks = []
    for s in range(d):
        parts = [build_1d("C" if i == s else "R", level) for i in range(d)]
        E = parts[0]
        for p in parts[1:]:
            E = enc.tensor(E, p)
        blocks.append(_group(E, d))
    E = enc.vstack(blocks)
    if d > 1:
        order = list(range(1, d + 1)) + [0] + list(range(d + 1, 2 * d + 1))
        E = enc.reorder(E, out_order=order)
    E.subnorm_bound = E.gamma / grad_norm(d, level)
    E.label = f"C{level}"
    return E


def _transfer_gates(work: tuple[int, ...], k: int, level: int, L: int, controls=None) -> list[Gate]:
    gates = []
    for m in range(level, L):
        child = work[L - m - 1]
        g = Gate("U", (k, child), matrix=T_GATE)
        gates.append(g)
    if controls:
        gates = enc._controlled_gates(gates, controls)
    return gates


def build_U_transfer_1d(level: int, L: int) -> BlockEncoding:
    work = tuple(range(L))
    k = L
    c = Circuit(L + 1)
    c.registers.update(work=work, k=(k,))
    c.extend(_transfer_gates(work, k, level, L))
    pin = Projection.single((work[L - level:], 2**level), ((k,), 2))
    pout = Projection.single((work, 2**L), ((k,), 2))
    return BlockEncoding(c, 1.0, pin, pout, 1.0, 1.0, f"T{level},{L}")


def build_U_transfer(d: int, level: int, L: int, with_direction: bool = False) -> BlockEncoding:
    """T_{l,L} on |j>|k> (or |j>|s>|k> with the direction passed through)."""
    E = build_U_transfer_1d(level, L)
    for _ in range(d - 1):
        E = enc.tensor(E, build_U_transfer_1d(level, L))
    if d > 1:
        order = [2 * i for i in range(d)] + [2 * i + 1 for i in range(d)]
        E = enc.reorder(E, order, order)
    if with_direction and d > 1:
        E = enc.tensor(enc.identity(n_sel(d), d), E)
        order = list(range(1, d + 1)) + [0] + list(range(d + 1, 2 * d + 1))
        E = enc.reorder(E, order, order)
    E.label = f"T{level},{L}"
    return E


def build_level_block(d: int, level: int, L: int) -> BlockEncoding:
    """2^(-l(2-d)/2) T~_{l,L} C_l."""
    E = enc.multiply(build_U_transfer(d, level, L, with_direction=True), build_U_grad(d, level))
    return enc.scale(E, fem.level_scale(d, level))


def build_U_CF(d: int, L: int) -> BlockEncoding:
    """C_F via the generic calculus: hconcat over levels of scaled T~ C_l."""
    E = enc.hconcat([build_level_block(d, l, L) for l in range(1, L + 1)])
    E.label = "C_F"
    E.info["path"] = "generic"
    return E


# ------------------------------------------------------------ optimized path

@dataclass
class CFLayout:
    d: int
    L: int
    lvl: tuple[int, ...]
    s: tuple[int, ...]
    work: list[tuple[int, ...]]
    t: list[int]
    b: list[int]

    @classmethod
    def allocate(cls, d: int, L: int) -> "CFLayout":
        c = Circuit(0)
        lvl = c.add_register("lvl", n_sel(L))
        s = c.add_register("s", n_sel(d))
        work, t, b = [], [], []
        for i in range(d):
            work.append(c.add_register(f"work{i}", L))
            t.append(c.add_register(f"t{i}", 1)[0])
            b.append(c.add_register(f"b{i}", 1)[0])
        return cls(d, L, lvl, s, work, t, b)

    @property
    def n_qubits(self) -> int:
        return len(self.lvl) + len(self.s) + self.d * (self.L + 2)

    def registers(self) -> dict:
        out = {"lvl": self.lvl, "s": self.s}
        for i in range(self.d):
            out.update({f"work{i}": self.work[i], f"t{i}": (self.t[i],), f"b{i}": (self.b[i],)})
        return out

    def proj_in(self) -> Projection:
        branches = []
        for l in range(1, self.L + 1):
            ones = {q for q, v in enc._sel_controls(self.lvl, l - 1).items() if v}
            regs = tuple((w[self.L - l:], 2**l - 1) for w in self.work)
            branches.append(Branch(regs, frozenset(ones)))
        return Projection(tuple(branches))

    def proj_out(self) -> Projection:
        regs = [(w, 2**self.L) for w in self.work]
        if self.s:
            regs.append((self.s, self.d))
        regs += [((t,), 2) for t in self.t]
        return Projection.single(*regs)


def _shift_gates(work, lvl, L: int, inverse: bool) -> list[Gate]:
    """Rotate a level-l index from the top l bits to the bottom (or back)."""
    gates = [Gate("SHIFT", work, param=L - 1)]
    for i, q in enumerate(lvl):
        gates.append(Gate("SHIFT", work, (q,), (1,), param=-(2**i)))
    if inverse:
        gates = [g.inverse() for g in reversed(gates)]
    return gates


def build_U_CF_optimized(d: int, L: int) -> BlockEncoding:
    """C_F with one increment per dimension shared by all levels.

    The level register selects how far the work register is rotated before
    the increment; transfer gates for refinement m fire when the level is
    below m.  Level and direction selectors are uniform superpositions since
    all level blocks carry the same normalization.
    """
    lay = CFLayout.allocate(d, L)
    c = Circuit(lay.n_qubits)
    c.registers.update(lay.registers())
    lvl_prep = prepare_amplitudes(np.ones(L), list(reversed(lay.lvl))) if lay.lvl else []
    if lay.s:
        c.extend(prepare_amplitudes(np.ones(d), list(reversed(lay.s))))
    for i in range(d):
        w, t, b = lay.work[i], lay.t[i], lay.b[i]
        c.append("H", t)
        c.extend(_shift_gates(w, lay.lvl, L, inverse=False))
        c.append("INC", w, controls=t, param=1)
        c.extend(_shift_gates(w, lay.lvl, L, inverse=True))
        if d == 1:
            c.append("U", (t, b), matrix=DIL_C)
        else:
            for s in range(d):
                ctrl = enc._sel_controls(lay.s, s)
                c.append("U", (t, b), tuple(ctrl), tuple(ctrl.values()), matrix=DIL_C if s == i else DIL_R)
        for m in range(1, L):
            for cond in enc.lt_terms(lay.lvl, m):
                c.extend(enc._controlled_gates([Gate("U", (t, w[L - m - 1]), matrix=T_GATE)], cond))
    c.extend(g.inverse() for g in reversed(lvl_prep))
    gamma = 2 * np.sqrt(d * L)
    blocks = [build_level_block_bound(d, l) for l in range(1, L + 1)]
    sub = float(np.sqrt(sum(v**2 for v in blocks)))
    E = BlockEncoding(c, gamma, lay.proj_in(), lay.proj_out(), sub, None, "C_F")
    E.info.update(path="optimized", layout=lay)
    return E


def build_level_block_bound(d: int, level: int) -> float:
    """Subnormalization of one level block: gamma(C_l) / |C_l| (transfer is isometric)."""
    g = 2 * np.sqrt(d) * 2.0 ** (level * (2 - d) / 2)
    return g / grad_norm(d, level)


# -------------------------------------------------------- coefficient, S

def build_U_DA(coef: fem.Coefficient) -> BlockEncoding:
    """D_A x Id_{2^d} for a scalar coefficient: one rotation per cell value.

    Rotations are uniformly controlled on the cell registers; controls that
    do not change the angle are dropped, so a constant coefficient needs no
    gates at all.
    """
    if not coef.is_scalar:
        raise NonScalarCoefficient("matrix-valued coefficients are handled by the emulation path")
    d, L = coef.d, coef.L
    c = Circuit(0)
    cells = [c.add_register(f"cell{i}", L) for i in range(d)]
    s = c.add_register("s", n_sel(d))
    ks = [c.add_register(f"k{i}", 1)[0] for i in range(d)]
    anc = c.add_register("anc", 1)[0]
    beta = coef.beta
    theta = 2 * np.arccos(np.clip(coef.values / beta, -1, 1))
    controls = [q for reg in cells for q in reversed(reg)]  # most significant first
    gates: list[Gate] = []
    _uniform_ry(anc, controls, theta, (), gates)
    c.extend(gates)
    regs = [(w, 2**L) for w in cells]
    if s:
        regs.append((s, d))
    regs += [((k,), 2) for k in ks]
    p = Projection.single(*regs)
    return BlockEncoding(c, beta, p, p, beta / coef.values.max(), coef.beta / coef.alpha, "D_A")


def stiffness_sandwich(CF: BlockEncoding, DA: BlockEncoding) -> BlockEncoding:
    """C_F^T D_A C_F with gamma = gamma_A gamma_CF^2.

    The product rule alone cannot bound the subnormalization of a wide-times-
    tall product; here |C^T D C| >= lambda_min(D) |C|^2 gives
    kappa(D) sub(D) sub(C)^2.
    """
    E = enc.multiply(enc.adjoint(CF), enc.multiply(DA, CF))
    if CF.subnorm_bound is not None and DA.subnorm_bound is not None and DA.kappa is not None:
        E.subnorm_bound = DA.kappa * DA.subnorm_bound * CF.subnorm_bound**2
    E.label = "F^T S F"
    return E
