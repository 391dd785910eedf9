"""Block encodings of non-square matrices and the operations on them.

A block encoding is a circuit ``U`` together with a scale ``gamma`` and two
projections.  The encoded matrix is ``A = gamma * Pi_out U Pi_in^dagger``.

A projection is an ordered list of branches.  A branch fixes some qubits to 1,
lets a list of registers range over ``0 .. bound-1`` and fixes every other
qubit to 0.  Rows (or columns) are numbered branch by branch and inside a
branch with the first register most significant.  Qubits outside a circuit
count as 0, so projections stay valid when a circuit is embedded into a larger
one.

To combine two encodings the qubits of one are identified with qubits of the
other by their role: the register position and bit they carry in each branch,
or their fixed value.  Qubits that are fixed to 0 in the relevant projection
and have no partner get fresh wires.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product
from math import ceil, log2

import numpy as np

from . import sim
from .circuit import Circuit, Gate
from .stateprep import phase_flip_gates, prepare_amplitudes

MAX_EXTRACT_QUBITS = 22


class IncompatibleProjection(ValueError):
    pass


# ----------------------------------------------------------------- projections

Register = tuple[tuple[int, ...], int]  # (qubits, least significant first; bound)


@dataclass(frozen=True)
class Branch:
    registers: tuple[Register, ...] = ()
    ones: frozenset[int] = frozenset()

    def __post_init__(self):
        seen = set(self.ones)
        for qs, bound in self.registers:
            if not 1 <= bound <= 2 ** len(qs):
                raise ValueError(f"bound {bound} does not fit {len(qs)} qubits")
        # high bits that are 0 for every value below the bound become ordinary
        # zero-fixed qubits, so equal bounds give equal register widths
        trimmed = tuple((tuple(qs[: (bound - 1).bit_length()]), bound) for qs, bound in self.registers)
        object.__setattr__(self, "registers", trimmed)
        for qs, bound in self.registers:
            if seen & set(qs):
                raise ValueError("qubit used twice in a branch")
            seen |= set(qs)

    @property
    def dim(self) -> int:
        return int(np.prod([b for _, b in self.registers], dtype=np.int64))

    @property
    def index_qubits(self) -> set[int]:
        return {q for qs, _ in self.registers for q in qs}

    @property
    def base(self) -> int:
        return sum(1 << q for q in self.ones)

    def indices(self) -> np.ndarray:
        idx = np.array([self.base], dtype=np.int64)
        for qs, bound in self.registers:
            vals = np.arange(bound, dtype=np.int64)
            enc = np.zeros(bound, dtype=np.int64)
            for i, q in enumerate(qs):
                enc |= ((vals >> i) & 1) << q
            idx = (idx[:, None] | enc[None, :]).reshape(-1)
        return idx

    def member(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        free = sum(1 << q for q in self.index_qubits)
        ok = (idx & ~free) == self.base
        for qs, bound in self.registers:
            val = np.zeros_like(idx)
            for i, q in enumerate(qs):
                val |= ((idx >> q) & 1) << i
            ok &= val < bound
        return ok

    def remap(self, qmap) -> "Branch":
        return Branch(
            tuple((tuple(qmap[q] for q in qs), b) for qs, b in self.registers),
            frozenset(qmap[q] for q in self.ones),
        )

    def role(self, q: int):
        for pos, (qs, bound) in enumerate(self.registers):
            if q in qs:
                return ("r", pos, qs.index(q), len(qs), bound)
        return ("f", int(q in self.ones))

    def shape(self) -> tuple[tuple[int, int], ...]:
        return tuple((len(qs), b) for qs, b in self.registers)


@dataclass(frozen=True)
class Projection:
    branches: tuple[Branch, ...]

    @classmethod
    def single(cls, *registers: Register, ones=()) -> "Projection":
        return cls((Branch(tuple(registers), frozenset(ones)),))

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self.branches)

    def indices(self) -> np.ndarray:
        return np.concatenate([b.indices() for b in self.branches])

    def member(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        ok = np.zeros(idx.shape, dtype=bool)
        for b in self.branches:
            ok |= b.member(idx)
        return ok

    def remap(self, qmap) -> "Projection":
        return Projection(tuple(b.remap(qmap) for b in self.branches))

    def mentioned(self) -> set[int]:
        out = set()
        for b in self.branches:
            out |= b.index_qubits | set(b.ones)
        return out

    def signature(self, q: int):
        roles = tuple(b.role(q) for b in self.branches)
        if all(r[0] == "f" for r in roles) and len({r[1] for r in roles}) == 1:
            return ("const", roles[0][1])
        return roles

    def add_ones(self, qubits) -> "Projection":
        qubits = frozenset(qubits)
        return Projection(tuple(Branch(b.registers, b.ones | qubits) for b in self.branches))

    @property
    def is_single(self) -> bool:
        return len(self.branches) == 1

    def full_range(self) -> bool:
        return all(bound == 2 ** len(qs) for b in self.branches for qs, bound in b.registers)


# --------------------------------------------------------------- encodings

@dataclass
class BlockEncoding:
    circuit: Circuit
    gamma: float
    proj_in: Projection
    proj_out: Projection
    subnorm_bound: float | None = None
    kappa: float | None = None
    label: str = ""
    info: dict = field(default_factory=dict)

    @property
    def n_qubits(self) -> int:
        return self.circuit.n_qubits

    @property
    def shape(self) -> tuple[int, int]:
        return self.proj_out.dim, self.proj_in.dim

    def stats(self) -> dict:
        st = self.circuit.stats()
        st.update(gamma=self.gamma, rows=self.shape[0], cols=self.shape[1])
        return st


def extract_matrix(enc: BlockEncoding, chunk_elems: int = 2**24) -> np.ndarray:
    """gamma * Pi_out U Pi_in^dagger by simulating U on every column basis state."""
    n = enc.n_qubits
    if n > MAX_EXTRACT_QUBITS:
        raise ValueError(f"{n} qubits exceeds the extraction limit of {MAX_EXTRACT_QUBITS}")
    cols = enc.proj_in.indices()
    rows = enc.proj_out.indices()
    out = np.zeros((len(rows), len(cols)), dtype=complex)
    step = max(1, chunk_elems // 2**n)
    for start in range(0, len(cols), step):
        part = cols[start:start + step]
        E = np.zeros((2**n, len(part)), dtype=complex)
        E[part, np.arange(len(part))] = 1
        out[:, start:start + step] = sim.simulate(enc.circuit, E)[rows]
    out *= enc.gamma
    if np.allclose(out.imag, 0, atol=1e-12):
        return out.real
    return out


def measured_subnormalization(enc: BlockEncoding) -> float:
    return enc.gamma / np.linalg.norm(extract_matrix(enc), 2)


# ------------------------------------------------------------- primitives

def _nq(dim: int) -> int:
    return max(0, ceil(log2(dim))) if dim > 1 else 0


def dilation(A: np.ndarray) -> np.ndarray:
    """Unitary [[A, sqrt(I-AA^H)], [sqrt(I-A^H A), -A^H]] for |A| <= 1."""
    A = np.asarray(A, dtype=complex)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("dilation needs a square block")
    u, s, vh = np.linalg.svd(A)
    if s[0] > 1 + 1e-10:
        raise ValueError("block norm exceeds one")
    c = np.sqrt(np.clip(1 - s**2, 0, None))
    top = np.hstack([A, (u * c) @ u.conj().T])
    bot = np.hstack([(vh.conj().T * c) @ vh, -A.conj().T])
    return np.vstack([top, bot])


def _pad(A: np.ndarray, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols), dtype=complex)
    out[: A.shape[0], : A.shape[1]] = A
    return out


def encode_unitary(U, label: str = "") -> BlockEncoding:
    """Trivial encoding of a circuit or of a unitary matrix (gamma = 1)."""
    if isinstance(U, Circuit):
        c = U.copy()
        n = c.n_qubits
    else:
        U = np.asarray(U, dtype=complex)
        n = _nq(U.shape[0])
        if U.shape != (2**n, 2**n) or not np.allclose(U.conj().T @ U, np.eye(2**n), atol=1e-10):
            raise ValueError("not a unitary on whole qubits")
        c = Circuit(n)
        if n:
            c.append("U", tuple(range(n)), matrix=U)
    reg = tuple(range(n))
    c.registers.setdefault("data", reg)
    p = Projection.single((reg, 2**n))
    return BlockEncoding(c, 1.0, p, p, 1.0, 1.0, label or "U")


def encode_matrix(A: np.ndarray, gamma: float | None = None, label: str = "") -> BlockEncoding:
    """Dilation encoding of an arbitrary (m x n) matrix with one extra qubit."""
    A = np.asarray(A)
    m, n = A.shape
    norm = np.linalg.norm(A, 2)
    gamma = float(norm) if gamma is None else float(gamma)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if norm > gamma * (1 + 1e-12):
        raise ValueError("gamma is smaller than the norm")
    k = max(_nq(m), _nq(n))
    blk = _pad(A / gamma, 2**k, 2**k)
    c = Circuit(k + 1)
    data = tuple(range(k))
    c.registers["data"] = data
    c.registers["anc"] = (k,)
    c.append("U", tuple(range(k + 1)), matrix=dilation(blk))
    sv = np.linalg.svd(A, compute_uv=False)
    kap = float(sv[0] / sv[min(m, n) - 1]) if sv[min(m, n) - 1] > 0 else np.inf
    return BlockEncoding(
        c, gamma, Projection.single((data, n)), Projection.single((data, m)),
        gamma / norm if norm > 0 else np.inf, kap, label or "A",
    )


def identity(n_qubits: int, bound: int | None = None) -> BlockEncoding:
    bound = 2**n_qubits if bound is None else bound
    c = Circuit(n_qubits)
    reg = tuple(range(n_qubits))
    c.registers["data"] = reg
    p = Projection.single((reg, bound))
    return BlockEncoding(c, 1.0, p, p, 1.0, 1.0, "I")


# ------------------------------------------------------------ projection tools

def lt_terms(qubits: tuple[int, ...], bound: int) -> list[dict[int, int]]:
    """Disjoint conditions whose union is ``value(qubits) < bound``."""
    n = len(qubits)
    if bound >= 2**n:
        return [{}]
    if bound <= 0:
        return []
    terms = []
    for i in reversed(range(n)):
        if (bound >> i) & 1:
            cond = {qubits[j]: (bound >> j) & 1 for j in range(i + 1, n)}
            cond[qubits[i]] = 0
            terms.append(cond)
    return terms


def projection_terms(proj: Projection, qubits) -> list[dict[int, int]]:
    """Disjoint conditions on ``qubits`` whose union is membership in ``proj``."""
    qubits = list(qubits)
    terms = []
    for b in proj.branches:
        idxq = b.index_qubits
        base = {q: int(q in b.ones) for q in qubits if q not in idxq}
        for combo in product(*[lt_terms(qs, bound) for qs, bound in b.registers]):
            cond = dict(base)
            for part in combo:
                cond.update(part)
            terms.append(cond)
    return terms


def cnot_pi(proj: Projection, qubits, flag: int, controls: dict | None = None) -> list[Gate]:
    """Flip ``flag`` iff the state of ``qubits`` lies in the projection.

    Built from multi-controlled X gates, one per disjoint comparator term, so
    no ancilla besides the flag is used.
    """
    out = []
    for cond in projection_terms(proj, qubits):
        cond = {**cond, **(controls or {})}
        cs = tuple(cond)
        out.append(Gate("X", (flag,), cs, tuple(cond[q] for q in cs)))
    return out


def reflection(proj: Projection, qubits, controls: dict | None = None) -> list[Gate]:
    """I - 2P on ``qubits`` (optionally controlled), as phase flips per term."""
    out = []
    for cond in projection_terms(proj, qubits):
        cond = {**cond, **(controls or {})}
        if not cond:
            raise ValueError("projection covers the whole space; the reflection is a global phase")
        out.extend(phase_flip_gates(cond))
    return out


def _controlled_gates(gates, controls: dict[int, int]) -> list[Gate]:
    out = []
    for g in gates:
        for q, v in controls.items():
            g = g.with_control(q, v)
        out.append(g)
    return out


def _sel_controls(qubits: tuple[int, ...], value: int) -> dict[int, int]:
    return {q: (value >> i) & 1 for i, q in enumerate(qubits)}


# ----------------------------------------------------------- identification

def _is_fixed(sig) -> bool:
    return all(x[0] == "const" for x in sig)


def _identify(ref: list[Projection], ref_qubits, other: list[Projection], other_qubits,
              overlay_fixed: bool) -> tuple[dict[int, int], list[int]]:
    """Map qubits of ``other`` onto qubits of ``ref`` with equal roles.

    Roles are compared across all listed projections at once.  Fixed qubits
    are overlaid on equally fixed partners when ``overlay_fixed`` is set;
    otherwise, and when no partner is left, qubits fixed to 0 everywhere get
    fresh wires.  Returns the partial map and the qubits needing fresh wires.
    """
    def sig(pairs, q):
        return tuple(p.signature(q) for p in pairs)

    zero = tuple(("const", 0) for _ in other)
    pool: dict[object, list[int]] = {}
    for q in ref_qubits:
        pool.setdefault(sig(ref, q), []).append(q)
    qmap, fresh = {}, []
    order = sorted(other_qubits, key=lambda q: _is_fixed(sig(other, q)))
    for q in order:
        s = sig(other, q)
        if not _is_fixed(s) or overlay_fixed:
            cands = pool.get(s, [])
            if cands:
                qmap[q] = cands.pop(0)
                continue
        if s == zero:
            fresh.append(q)
            continue
        raise IncompatibleProjection(f"no partner for a qubit with role {s}")
    return qmap, fresh


@dataclass
class _Alignment:
    qmap: dict[int, int]
    fresh: list[int]  # qubits of the other encoding that need new wires
    pre_fresh: list[int]  # fresh qubits to set before the branch
    post_fresh: list[int]  # fresh qubits to reset after the branch
    flip_ref: list[int]  # reference wires to flip inside the branch


def _align(ref: list[Projection], ref_n: int, other: list[Projection], other_n: int,
           own_output: bool) -> _Alignment:
    """Identify ``other`` with ``ref`` for a branch controlled by a selector.

    ``ref``/``other`` list the input projection first (and the output one
    second when the result reads rows through ``ref``).  Fixed qubits without
    a partner are reconciled by X gates inside the branch: fresh wires start
    at 0 and must enter ``other`` at its fixed input value, unmatched
    reference wires keep their input value and must leave at the value the
    result's output projection expects.  With ``own_output`` the branch's
    rows are read through ``other``'s own output projection.
    """
    def sig(projs, q):
        return tuple(p.signature(q) for p in projs)

    pool: dict[object, list[int]] = {}
    for q in range(ref_n):
        pool.setdefault(sig(ref, q), []).append(q)
    al = _Alignment({}, [], [], [], [])
    for q in sorted(range(other_n), key=lambda q: _is_fixed(sig(other, q))):
        s = sig(other, q)
        cands = pool.get(s, [])
        if cands:
            al.qmap[q] = cands.pop(0)
            continue
        if not _is_fixed(s):
            raise IncompatibleProjection(f"no partner for a qubit with role {s}")
        al.fresh.append(q)
        if s[0][1]:
            al.pre_fresh.append(q)
        if not own_output and s[-1][1]:
            al.post_fresh.append(q)
    used = set(al.qmap.values())
    for q in range(ref_n):
        if q in used:
            continue
        s = sig(ref, q)
        if not _is_fixed(s):
            raise IncompatibleProjection(f"reference qubit {q} with role {s} has no partner")
        v_in = s[0][1]
        v_out = 0 if own_output else s[-1][1]
        if v_in != v_out:
            al.flip_ref.append(q)
    return al


def _branch_gates(gates, qmap_full: list[int], al: _Alignment, controls: dict[int, int]) -> list[Gate]:
    """``gates`` remapped and controlled, wrapped in the alignment corrections."""
    pre = [Gate("X", (qmap_full[q],)) for q in al.pre_fresh]
    post = [Gate("X", (qmap_full[q],)) for q in al.post_fresh] + [Gate("X", (q,)) for q in al.flip_ref]
    body = [g.remap(qmap_full) for g in gates]
    return _controlled_gates(pre + body + post, controls)


def _check_shapes(a: Projection, b: Projection, what: str):
    sa = [br.shape() for br in a.branches]
    sb = [br.shape() for br in b.branches]
    if sa != sb:
        raise IncompatibleProjection(f"{what}: register shapes {sa} and {sb} differ")


# ---------------------------------------------------------------- operations

def tensor(A: BlockEncoding, B: BlockEncoding) -> BlockEncoding:
    """A (x) B, with B's index least significant."""
    if not (B.proj_in.is_single and B.proj_out.is_single):
        raise IncompatibleProjection("the right tensor factor needs single-branch projections")
    na = A.n_qubits
    shift = [q + na for q in range(B.n_qubits)]
    c = Circuit(na + B.n_qubits)
    c.extend(A.circuit.gates)
    c.compose(B.circuit, shift)
    for name, qs in A.circuit.registers.items():
        c.registers[f"{name}"] = qs
    for name, qs in B.circuit.registers.items():
        c.registers[f"{name}'"] = tuple(shift[q] for q in qs)

    def prod_proj(pa: Projection, pb: Projection) -> Projection:
        bb = pb.remap(shift).branches[0]
        return Projection(tuple(Branch(a.registers + bb.registers, a.ones | bb.ones) for a in pa.branches))

    sub = None
    if A.subnorm_bound is not None and B.subnorm_bound is not None:
        sub = A.subnorm_bound * B.subnorm_bound
    kap = A.kappa * B.kappa if A.kappa is not None and B.kappa is not None else None
    return BlockEncoding(
        c, A.gamma * B.gamma, prod_proj(A.proj_in, B.proj_in), prod_proj(A.proj_out, B.proj_out),
        sub, kap, f"({A.label} x {B.label})",
    )


def adjoint(A: BlockEncoding) -> BlockEncoding:
    return BlockEncoding(
        A.circuit.inverse(), A.gamma, A.proj_out, A.proj_in, A.subnorm_bound, A.kappa,
        f"{A.label}^T", dict(A.info),
    )


def scale(A: BlockEncoding, c: float) -> BlockEncoding:
    """c * A for c > 0: only the scale label changes."""
    if c <= 0:
        raise ValueError("scale factor must be positive")
    return replace(A, gamma=A.gamma * c, label=f"{c:g}*{A.label}")


def reorder(A: BlockEncoding, out_order=None, in_order=None) -> BlockEncoding:
    """Permute the register order of single-branch projections (no gates)."""
    def perm(p: Projection, order):
        if order is None:
            return p
        if not p.is_single:
            raise IncompatibleProjection("reorder needs a single-branch projection")
        b = p.branches[0]
        if sorted(order) != list(range(len(b.registers))):
            raise ValueError("order is not a permutation of the registers")
        return Projection((Branch(tuple(b.registers[i] for i in order), b.ones),))
    return replace(A, proj_out=perm(A.proj_out, out_order), proj_in=perm(A.proj_in, in_order))


def _is_tall(E: BlockEncoding) -> bool:
    return E.shape[0] >= E.shape[1]


def multiply(A: BlockEncoding, B: BlockEncoding, flag: bool | None = None) -> BlockEncoding:
    """A @ B.

    The columns of A are identified with the rows of B.  If B's output
    projection is a single full-range branch, A can act directly; otherwise a
    flag qubit records whether B's output landed in its projection and the
    product is read off with flag = 1.
    """
    _check_shapes(A.proj_in, B.proj_out, "multiply")
    simple = B.proj_out.is_single and B.proj_out.full_range()
    use_flag = (not simple) if flag is None else flag
    nb = B.n_qubits
    if use_flag:
        qmap, fresh = _identify([B.proj_out], range(nb), [A.proj_in], range(A.n_qubits), overlay_fixed=True)
        ones_fixed: list[int] = []
    else:
        qmap, fresh, ones_fixed = _identify_with_ones(B.proj_out, nb, A.proj_in, A.n_qubits)
    n = nb + len(fresh) + len(ones_fixed)
    full = dict(qmap)
    for i, q in enumerate(fresh + ones_fixed):
        full[q] = nb + i
    flag_q = None
    if use_flag:
        flag_q = n
        n += 1
    c = Circuit(n)
    c.registers.update({f"B.{k}": v for k, v in B.circuit.registers.items()})
    c.extend(B.circuit.gates)
    for q in ones_fixed:
        c.append("X", full[q])
    if use_flag:
        c.registers["flag"] = (flag_q,)
        c.extend(cnot_pi(B.proj_out, range(nb), flag_q))
    amap = [full[q] for q in range(A.n_qubits)]
    c.compose(A.circuit, amap)
    out = A.proj_out.remap(amap)
    # B's qubits untouched by A keep their fixed output value
    leftover = set(range(nb)) - set(amap)
    extra_ones = set()
    for q in leftover:
        s = B.proj_out.signature(q)
        if s[0] != "const":
            raise IncompatibleProjection("an index qubit of B has no partner in A")
        if s[1] == 1:
            extra_ones.add(q)
    if flag_q is not None:
        extra_ones.add(flag_q)
    out = out.add_ones(extra_ones)
    sub = None
    if A.subnorm_bound is not None and B.subnorm_bound is not None:
        if _is_tall(A) and A.kappa is not None:
            sub = A.kappa * A.subnorm_bound * B.subnorm_bound
        elif not _is_tall(B) or B.shape[0] == B.shape[1]:
            if B.kappa is not None:
                sub = B.kappa * A.subnorm_bound * B.subnorm_bound
    kap = None
    if A.kappa == 1.0 and _is_tall(A) and B.kappa is not None:
        kap = B.kappa
    return BlockEncoding(c, A.gamma * B.gamma, B.proj_in, out, sub, kap, f"{A.label}{B.label}")


def _identify_with_ones(pb: Projection, nb: int, pa: Projection, na: int):
    """Identification for the flag-free product: A's fixed qubits get fresh wires."""
    qmap, fresh, ones_fixed = {}, [], []
    pool: dict[object, list[int]] = {}
    for q in range(nb):
        pool.setdefault(pb.signature(q), []).append(q)
    for q in range(na):
        s = pa.signature(q)
        if s[0] == "const":
            (ones_fixed if s[1] == 1 else fresh).append(q)
            continue
        cands = pool.get(s, [])
        if not cands:
            raise IncompatibleProjection(f"no partner for a qubit with role {s}")
        qmap[q] = cands.pop(0)
    return qmap, fresh, ones_fixed


def _prep_selector(weights: np.ndarray, qubits: tuple[int, ...]) -> list[Gate]:
    """Amplitudes sqrt(weights) on a selector register (least significant first)."""
    v = np.zeros(2 ** len(qubits))
    v[: len(weights)] = np.sqrt(weights)
    return prepare_amplitudes(v, list(reversed(qubits)))


def _stack_layout(blocks: list[BlockEncoding]) -> tuple[bool, list[_Alignment]]:
    """Align every block with the first: both sides if possible, else columns only."""
    ref = blocks[0]
    if ref.proj_out.is_single:
        try:
            als = []
            for b in blocks[1:]:
                _check_shapes(ref.proj_out, b.proj_out, "stack")
                als.append(_align([ref.proj_in, ref.proj_out], ref.n_qubits, [b.proj_in, b.proj_out],
                                  b.n_qubits, own_output=False))
            return True, als
        except IncompatibleProjection:
            pass
    als = [_align([ref.proj_in], ref.n_qubits, [b.proj_in], b.n_qubits, own_output=True) for b in blocks[1:]]
    return False, als


def vstack(blocks: list[BlockEncoding]) -> BlockEncoding:
    """[A_1; A_2; ...] sharing one column space."""
    if len(blocks) == 1:
        return blocks[0]
    for b in blocks[1:]:
        _check_shapes(blocks[0].proj_in, b.proj_in, "vstack")
    both, als = _stack_layout(blocks)
    ref = blocks[0]
    n0 = ref.n_qubits
    nfresh = max((len(al.fresh) for al in als), default=0)
    ns = _nq(len(blocks))
    sel = tuple(range(n0 + nfresh, n0 + nfresh + ns))
    c = Circuit(n0 + nfresh + ns)
    c.registers.update(ref.circuit.registers)
    c.registers["sel"] = sel
    gammas = np.array([b.gamma for b in blocks])
    gamma = float(np.sqrt(np.sum(gammas**2)))
    c.extend(_prep_selector(gammas**2 / gamma**2, sel))
    branches = []
    c.extend(_controlled_gates(ref.circuit.gates, _sel_controls(sel, 0)))
    if not both:
        branches.extend(ref.proj_out.branches)
    for k, (b, al) in enumerate(zip(blocks[1:], als), start=1):
        full = dict(al.qmap)
        for i, q in enumerate(al.fresh):
            full[q] = n0 + i
        amap = [full[q] for q in range(b.n_qubits)]
        c.extend(_branch_gates(b.circuit.gates, amap, al, _sel_controls(sel, k)))
        if not both:
            ones = {q for q, v in _sel_controls(sel, k).items() if v}
            branches.extend(b.proj_out.remap(amap).add_ones(ones).branches)
    if both:
        rb = ref.proj_out.branches[0]
        out = Projection((Branch(((sel, len(blocks)),) + rb.registers, rb.ones),))
    else:
        out = Projection(tuple(branches))
    sub = None
    if all(b.subnorm_bound is not None for b in blocks):
        sub = float(np.sqrt(sum(b.subnorm_bound**2 for b in blocks)))
    enc = BlockEncoding(c, gamma, ref.proj_in, out, sub, None, "[" + "; ".join(b.label for b in blocks) + "]")
    enc.info["stacked"] = both
    return enc


def hconcat(blocks: list[BlockEncoding]) -> BlockEncoding:
    """[A_1, A_2, ...] sharing one row space."""
    enc = adjoint(vstack([adjoint(b) for b in blocks]))
    enc.label = "[" + ", ".join(b.label for b in blocks) + "]"
    return enc


def block_diag(A: BlockEncoding, B: BlockEncoding) -> BlockEncoding:
    """diag(A, B) with a selector qubit; the smaller scale is padded by a rotation."""
    n0 = max(A.n_qubits, B.n_qubits)
    sel = n0
    gamma = max(A.gamma, B.gamma)
    need_rescale = not np.isclose(A.gamma, B.gamma)
    n = n0 + 1 + int(need_rescale)
    c = Circuit(n)
    c.registers["sel"] = (sel,)
    for v, E in ((0, A), (1, B)):
        c.extend(_controlled_gates(E.circuit.gates, {sel: v}))
        if need_rescale and E.gamma < gamma:
            c.registers["pad"] = (n0 + 1,)
            c.append("RY", n0 + 1, controls=sel, ctrl_state=(v,), param=2 * np.arccos(E.gamma / gamma))

    def merged(pa: Projection, pb: Projection) -> Projection:
        return Projection(pa.branches + pb.add_ones({sel}).branches)

    sub = None
    if A.subnorm_bound is not None and B.subnorm_bound is not None:
        # gamma / max(|A|, |B|) <= gamma / |A| <= gamma * sub_A / gamma_A, likewise for B
        sub = min(A.subnorm_bound * gamma / A.gamma, B.subnorm_bound * gamma / B.gamma)
    return BlockEncoding(c, gamma, merged(A.proj_in, B.proj_in), merged(A.proj_out, B.proj_out), sub, None,
                         f"diag({A.label}, {B.label})")


def add(A: BlockEncoding, B: BlockEncoding, mu_a: float = 1.0, mu_b: float = 1.0,
        norm_hint: float | None = None) -> BlockEncoding:
    """mu_a A + mu_b B by a one-qubit linear combination of unitaries."""
    _check_shapes(A.proj_in, B.proj_in, "add")
    _check_shapes(A.proj_out, B.proj_out, "add")
    al = _align([A.proj_in, A.proj_out], A.n_qubits, [B.proj_in, B.proj_out], B.n_qubits, own_output=False)
    n0 = A.n_qubits
    full = dict(al.qmap)
    for i, q in enumerate(al.fresh):
        full[q] = n0 + i
    sel = n0 + len(al.fresh)
    c = Circuit(sel + 1)
    c.registers.update(A.circuit.registers)
    c.registers["sel"] = (sel,)
    wa, wb = abs(mu_a) * A.gamma, abs(mu_b) * B.gamma
    gamma = wa + wb
    theta = 2 * np.arccos(np.sqrt(wa / gamma))
    c.append("RY", sel, param=theta)
    c.extend(_controlled_gates(A.circuit.gates, {sel: 0}))
    bmap = [full[q] for q in range(B.n_qubits)]
    c.extend(_branch_gates(B.circuit.gates, bmap, al, {sel: 1}))
    if mu_b < 0:
        c.append("Z", sel)
    if mu_a < 0:
        c.append("X", sel).append("Z", sel).append("X", sel)
    c.append("RY", sel, param=-theta)
    sub = gamma / norm_hint if norm_hint else None
    return BlockEncoding(c, gamma, A.proj_in, A.proj_out, sub, None, f"({mu_a:g}{A.label}+{mu_b:g}{B.label})")


def controlled_block_diag(selector_width: int, block_oracle, n_blocks: int | None = None) -> BlockEncoding:
    """diag(A_0, A_1, ...) with A_j = block_oracle(j) applied controlled on |j>.

    All blocks must share gamma, width and projections.  The selector register
    sits above the block qubits and is the most significant index.
    """
    n_blocks = 2**selector_width if n_blocks is None else n_blocks
    if not 1 <= n_blocks <= 2**selector_width:
        raise ValueError("block count does not fit the selector")
    first = block_oracle(0)
    k = first.n_qubits
    sel = tuple(range(k, k + selector_width))
    c = Circuit(k + selector_width)
    c.registers.update(first.circuit.registers)
    c.registers["sel"] = sel
    subs, kaps = [], []
    for j in range(n_blocks):
        E = first if j == 0 else block_oracle(j)
        if E.n_qubits > k:
            raise ValueError(f"block {j} acts on the selector register")
        if not np.isclose(E.gamma, first.gamma, rtol=1e-12):
            raise ValueError("blocks must share gamma")
        _check_shapes(first.proj_in, E.proj_in, "controlled_block_diag")
        if E.proj_in != first.proj_in or E.proj_out != first.proj_out:
            raise IncompatibleProjection(f"block {j} uses different projections")
        c.extend(_controlled_gates(E.circuit.gates, _sel_controls(sel, j)))
        subs.append(E.subnorm_bound)
        kaps.append(E.kappa)

    def lift(p: Projection) -> Projection:
        return Projection(tuple(Branch(((sel, n_blocks),) + b.registers, b.ones) for b in p.branches))

    sub = min(subs) if all(s is not None for s in subs) else None
    return BlockEncoding(c, first.gamma, lift(first.proj_in), lift(first.proj_out), sub, None, "diag_j")


def block_diag_matrices(blocks: list[np.ndarray], gamma: float | None = None) -> BlockEncoding:
    """diag(A_0, A_1, ...) of equally sized square blocks, one controlled dilation each.

    Rows and columns are ordered (block index, inner index).
    """
    blocks = [np.asarray(b) for b in blocks]
    m = blocks[0].shape[0]
    if any(b.shape != (m, m) for b in blocks):
        raise ValueError("blocks must be square and of equal size")
    norms = [np.linalg.norm(b, 2) for b in blocks]
    gamma = float(max(norms)) if gamma is None else float(gamma)
    k = _nq(m)
    ns = _nq(len(blocks))
    inner = tuple(range(k))
    anc = k
    sel = tuple(range(k + 1, k + 1 + ns))
    c = Circuit(k + 1 + ns)
    c.registers.update(inner=inner, anc=(anc,), sel=sel)
    for j, b in enumerate(blocks):
        U = dilation(_pad(b / gamma, 2**k, 2**k))
        c.append("U", inner + (anc,), controls=sel, ctrl_state=tuple(_sel_controls(sel, j).values()), matrix=U)
    p = Projection.single((sel, len(blocks)), (inner, m))
    sv = np.concatenate([np.linalg.svd(b, compute_uv=False) for b in blocks])
    kap = float(sv.max() / sv.min()) if sv.min() > 0 else np.inf
    return BlockEncoding(c, gamma, p, p, gamma / max(norms), kap, "diag")


def cnot_pi_circuit(proj: Projection, m: int) -> Circuit:
    """CNOT_Pi on m data qubits plus the flag as qubit m."""
    c = Circuit(m + 1)
    c.registers.update(data=tuple(range(m)), flag=(m,))
    c.extend(cnot_pi(proj, range(m), m))
    return c
