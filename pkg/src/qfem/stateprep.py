"""Amplitude encoding by Grover-Rudolph rotation trees.

For a real vector ``v`` over qubits ``q_1 .. q_n`` (``q_1`` most significant)
the tree stores ``g_k(x) = sum_y |v_{x.y}|^2`` for every prefix ``x`` of length
``k``.  Qubit ``q_{k+1}`` is rotated, controlled on the prefix ``x``, by
``theta = 2 arccos(sqrt(g_{k+1}(x.0) / g_k(x)))``.  Rotations that do not
depend on a control are emitted without it and zero rotations are dropped.
Negative entries get a phase flip afterwards.

For the preconditioned right-hand side ``F^T r`` the level register comes first
in the prefix order, so the circuit splits into a level phase and a spatial
phase.  Blocks of consecutive hats ``Lambda_{k,x}`` (all nodes sharing a
prefix) are integrated in closed form as a sum of four half-hat integrals.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Callable

import numpy as np

from .circuit import Circuit, Gate

# ----------------------------------------------------------- rotation trees


@dataclass
class AmplitudeTable:
    """g[k][x] for prefixes of length k = 0..n (g[n] are the squared entries)."""

    g: list[np.ndarray]
    signs: np.ndarray

    @property
    def n(self) -> int:
        return len(self.g) - 1

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "AmplitudeTable":
        v = np.asarray(v, dtype=float)
        n = int(round(np.log2(len(v))))
        if 2**n != len(v):
            raise ValueError("vector length must be a power of two")
        sq = v**2
        g = [sq.reshape(2**k, -1).sum(axis=1) for k in range(n + 1)]
        return cls(g, np.sign(v))

    def angles(self, k: int) -> np.ndarray:
        """Rotation angles for qubit k+1 (0-based k), indexed by prefix."""
        parent = self.g[k]
        left = self.g[k + 1][0::2]
        out = np.zeros_like(parent)
        nz = parent > 0
        ratio = np.clip(left[nz] / parent[nz], 0.0, 1.0)
        out[nz] = 2 * np.arccos(np.sqrt(ratio))
        return out

    def rows(self):
        """(k, x, g_k(x)) triples for CSV export."""
        for k, gk in enumerate(self.g):
            for x, val in enumerate(gk):
                yield k, x, float(val)


def write_table_csv(path, table: AmplitudeTable):
    with open(path, "w") as fh:
        fh.write("k,x,g_k\n")
        for k, x, val in table.rows():
            fh.write(f"{k},{x},{val!r}\n")


def _uniform_ry(target: int, controls: list[int], angles: np.ndarray, fixed: tuple, out: list, atol=1e-14):
    if np.allclose(angles, angles[0], rtol=0, atol=atol):
        if abs(angles[0]) > atol:
            cs, vs = zip(*fixed) if fixed else ((), ())
            out.append(Gate("RY", (target,), tuple(cs), tuple(vs), float(angles[0])))
        return
    c0, rest = controls[0], controls[1:]
    half = len(angles) // 2
    lo, hi = angles[:half], angles[half:]
    if np.allclose(lo, hi, rtol=0, atol=atol):
        _uniform_ry(target, rest, lo, fixed, out, atol)
        return
    _uniform_ry(target, rest, lo, fixed + ((c0, 0),), out, atol)
    _uniform_ry(target, rest, hi, fixed + ((c0, 1),), out, atol)


def phase_flip_gates(conds: dict[int, int]) -> list[Gate]:
    """Multiply by -1 the basis states matching ``conds`` (qubit -> value)."""
    if not conds:
        raise ValueError("a phase flip needs at least one condition")
    qs = list(conds)
    t = qs[-1]
    ctrl = tuple(qs[:-1])
    state = tuple(conds[q] for q in ctrl)
    z = Gate("Z", (t,), ctrl, state)
    if conds[t] == 1:
        return [z]
    x = Gate("X", (t,))
    return [x, z, x]


def rotation_tree(table: AmplitudeTable, qubits: list[int], phases=(None, None)) -> list[Gate]:
    """Gates preparing the table's state on ``qubits`` (most significant first)."""
    n = len(qubits)
    if table.n != n:
        raise ValueError("table size does not match the qubit count")
    k_lo, k_hi = phases
    k_lo = 0 if k_lo is None else k_lo
    k_hi = n if k_hi is None else k_hi
    gates: list[Gate] = []
    for k in range(k_lo, k_hi):
        _uniform_ry(qubits[k], qubits[:k], table.angles(k), (), gates)
    return gates


def sign_gates(table: AmplitudeTable, qubits: list[int]) -> list[Gate]:
    n = len(qubits)
    gates = []
    for x in np.nonzero(table.signs < 0)[0]:
        bits = [(int(x) >> (n - 1 - i)) & 1 for i in range(n)]
        gates.extend(phase_flip_gates(dict(zip(qubits, bits))))
    return gates


def prepare_amplitudes(v: np.ndarray, qubits: list[int]) -> list[Gate]:
    """Gates mapping |0..0> to v/|v| on ``qubits`` (most significant first).

    Shorter vectors are padded with zeros.
    """
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if nrm == 0:
        raise ValueError("cannot prepare the zero vector")
    if len(qubits) == 0:
        return []
    if len(v) > 2 ** len(qubits):
        raise ValueError("vector does not fit the qubits")
    v = np.concatenate([v, np.zeros(2 ** len(qubits) - len(v))])
    table = AmplitudeTable.from_vector(v / nrm)
    return rotation_tree(table, qubits) + sign_gates(table, qubits)


def prepare_circuit(v: np.ndarray) -> Circuit:
    """Stand-alone circuit on log2(len(v)) qubits with qubit 0 least significant."""
    n = int(round(np.log2(len(v))))
    c = Circuit(n)
    c.registers["data"] = tuple(range(n))
    c.extend(prepare_amplitudes(v, list(reversed(range(n)))))
    return c


# ------------------------------------------------------------- half hats

def _gl4(lo: float, hi: float):
    x, w = np.polynomial.legendre.leggauss(4)
    return lo + (hi - lo) * 0.5 * (x + 1), 0.5 * (hi - lo) * w


def _ramp_rule(lo: float, hi: float, rising: bool):
    """Quadrature points and weights of t -> ramp(t) on [lo, hi]."""
    if hi <= lo:
        return np.zeros(0), np.zeros(0)
    x, w = _gl4(lo, hi)
    ramp = (x - lo) / (hi - lo) if rising else (hi - x) / (hi - lo)
    return x, w * ramp


def _flat_rule(lo: float, hi: float):
    if hi <= lo:
        return np.zeros(0), np.zeros(0)
    return _gl4(lo, hi)


def _block_rules_1d(level: int, first: int, last: int):
    """Signed half-hat pieces (a, b+c, -d) of a block of consecutive hats.

    Nodes ``first..last`` (0-based, node j at vertex (j+1)h).  The sum of their
    hats is a trapezoid: the rising half-hat left of the first vertex (a), the
    indicator from the first vertex to one cell past the last vertex (b + c)
    and, subtracted, the rising half-hat on that last cell (d).
    """
    h = 2.0**-level
    v0, v1 = (first + 1) * h, (last + 1) * h
    pieces = [
        (_ramp_rule(v0 - h, v0, True), 1.0),
        (_flat_rule(v0, v1 + h), 1.0),
        (_ramp_rule(v1, v1 + h, True), -1.0),
    ]
    xs = np.concatenate([rule[0] for rule, _ in pieces])
    ws = np.concatenate([sign * rule[1] for rule, sign in pieces])
    return xs, ws


def prefix_node_ranges(d: int, level: int, k: int, x: int) -> list[tuple[int, int]]:
    """Per-axis inclusive node ranges for the prefix ``x`` of length ``k``.

    The flattened node index has ``d*level`` bits, axis 1 most significant,
    each axis using ``level`` bits.  Index ``2**level - 1`` on an axis is the
    boundary vertex and carries no hat.
    """
    if not 0 <= k <= d * level:
        raise ValueError("prefix length out of range")
    full = x << (d * level - k)
    ranges = []
    for axis in range(d):
        shift = level * (d - 1 - axis)
        fixed_bits = min(level, max(0, k - level * axis))
        val = (full >> shift) & (2**level - 1)
        lo = val
        hi = val + (1 << (level - fixed_bits)) - 1
        ranges.append((lo, min(hi, 2**level - 2)))
    return ranges


def half_hat_sums(f: Callable, d: int, level: int, k: int, x: int) -> float:
    """(Lambda_{k,x}, f): integral of f against the sum of hats sharing prefix x."""
    ranges = prefix_node_ranges(d, level, k, x)
    rules = []
    for lo, hi in ranges:
        if hi < lo:
            return 0.0
        rules.append(_block_rules_1d(level, lo, hi))
    pts = np.array(np.meshgrid(*[r[0] for r in rules], indexing="ij")).reshape(d, -1).T
    wts = np.prod(np.array(np.meshgrid(*[r[1] for r in rules], indexing="ij")).reshape(d, -1), axis=0)
    fv = np.array([f(p) for p in pts], dtype=float)
    return float(wts @ fv)


def node_inner_products(f: Callable, d: int, level: int) -> np.ndarray:
    """(Lambda_j, f) for all interior nodes of a level, via single-node blocks."""
    n = 2**level - 1
    out = np.zeros((n,) * d)
    for idx in product(range(n), repeat=d):
        x = 0
        for axis_val in idx:
            x = (x << level) | axis_val
        out[idx] = half_hat_sums(f, d, level, d * level, x)
    return out.reshape(-1)


def parse_rhs(text: str) -> Callable:
    """``const:<c>`` or ``poly:<c0,c1,...>`` (product of the polynomial over axes)."""
    kind, _, arg = text.partition(":")
    if kind == "const":
        c = float(arg or 1.0)
        return lambda p: c
    if kind == "poly":
        coeffs = [float(v) for v in arg.split(",")]
        return lambda p: float(np.prod(np.polynomial.polynomial.polyval(np.asarray(p), coeffs)))
    raise ValueError(f"unknown right-hand side '{text}'")


# ------------------------------------------------- preconditioned right side

@dataclass
class PreparedState:
    circuit: Circuit
    level_gates: list[Gate]
    spatial_gates: list[Gate]
    table: AmplitudeTable
    qubits: list[int]
    norm: float  # |F^T r| before normalization


def frame_rhs(f: Callable, d: int, L: int) -> np.ndarray:
    """F^T r with r_j = (Lambda_j^(L), f), level blocks concatenated."""
    parts = []
    for l in range(1, L + 1):
        parts.append(2.0 ** (-l * (2 - d) / 2) * node_inner_products(f, d, l))
    return np.concatenate(parts)


def embed_in_projection(vec: np.ndarray, proj, n_qubits: int) -> np.ndarray:
    """Place the entries of ``vec`` on the basis states of a projection."""
    full = np.zeros(2**n_qubits)
    full[proj.indices()] = vec
    return full


def prepare_in_projection(vec: np.ndarray, proj, n_qubits: int, first_qubits=()) -> PreparedState:
    """Rotation tree for ``vec`` laid out on the column space of an encoding.

    Only qubits that carry an index in some branch take part; ``first_qubits``
    (e.g. the level register, most significant first) lead the prefix order.
    """
    vec = np.asarray(vec, dtype=float)
    nrm = float(np.linalg.norm(vec))
    if nrm == 0:
        raise ValueError("cannot prepare the zero vector")
    active = set()
    for b in proj.branches:
        for qs, _ in b.registers:
            active.update(qs)
        active.update(b.ones)
    rest = sorted(active - set(first_qubits), reverse=True)
    order = list(first_qubits) + rest
    full = embed_in_projection(vec / nrm, proj, n_qubits)
    # reduce the full vector onto the active qubits in prefix order
    idx = np.zeros(2 ** len(order), dtype=np.int64)
    for pos, q in enumerate(order):
        bit = (np.arange(2 ** len(order)) >> (len(order) - 1 - pos)) & 1
        idx |= bit << q
    sub = full[idx]
    table = AmplitudeTable.from_vector(sub)
    nf = len(first_qubits)
    level_gates = rotation_tree(table, order, (0, nf))
    spatial_gates = rotation_tree(table, order, (nf, len(order))) + sign_gates(table, order)
    c = Circuit(n_qubits)
    c.extend(level_gates + spatial_gates)
    return PreparedState(c, level_gates, spatial_gates, table, order, nrm)
