"""Classical Q1 finite elements on the unit cube and the BPX generating system.

Everything here is assembled with plain linear algebra and serves as the
reference against which the circuit constructions are checked.

Conventions
-----------
* Level ``l`` has mesh width ``h = 2**-l``.  Interior node ``j`` (0-based) in one
  dimension sits at the vertex ``(j + 1) * h``; cell ``c`` covers
  ``[c * h, (c + 1) * h]``.
* Multi-indices are flattened with the first coordinate most significant.
* The discontinuous space ``Q_l`` uses per cell the orthonormal basis
  ``psi0 = 1`` and ``psi1 = sqrt(3) * (2y - 1)`` scaled by ``2**(l/2)``.
* Rows of gradient-type matrices are ordered ``|j>|s>|k>``: cell multi-index,
  then the derivative direction ``s``, then the local basis multi-index ``k``.

Matrices are built sparse internally; the public functions return dense arrays
unless ``sparse=True`` is passed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

MAX_NODES = 20000

SQ3 = np.sqrt(3.0)
# local maps from (right value, left value) of a cell to psi coefficients
B_R = np.array([[0.5, 0.5], [1 / (2 * SQ3), -1 / (2 * SQ3)]])
B_C = np.array([[1.0, -1.0], [0.0, 0.0]])
# refinement of (psi0, psi1) on a parent cell into its two children
T_LOCAL = np.array([[1.0, -SQ3 / 2], [0.0, 0.5], [1.0, SQ3 / 2], [0.0, 0.5]]) / np.sqrt(2)


@dataclass(frozen=True)
class LevelSpec:
    d: int
    L: int

    def __post_init__(self):
        if self.d < 1 or self.L < 1:
            raise ValueError("need d >= 1 and L >= 1")

    def h(self, level: int | None = None) -> float:
        return 2.0 ** -(self.L if level is None else level)

    def n_nodes(self, level: int | None = None) -> int:
        level = self.L if level is None else level
        return (2**level - 1) ** self.d

    def n_cells(self, level: int | None = None) -> int:
        level = self.L if level is None else level
        return 2 ** (self.d * level)

    def dim_Q(self, level: int | None = None) -> int:
        level = self.L if level is None else level
        return 2 ** (self.d * (level + 1))

    def dim_frame(self) -> int:
        return sum(self.n_nodes(l) for l in range(1, self.L + 1))

    def check_size(self):
        if self.n_nodes() > MAX_NODES:
            raise ValueError(f"(2^L-1)^d = {self.n_nodes()} exceeds the dense limit {MAX_NODES}")


def _out(M, sparse: bool):
    return M.tocsr() if sparse else M.toarray()


def level_scale(d: int, level: int) -> float:
    """Weight 2^(-l(2-d)/2) of level ``l`` in the generating system."""
    return 2.0 ** (-level * (2 - d) / 2)


# ---------------------------------------------------------------- 1D factors

def identity_embedding(level: int, sparse=False):
    n = 2**level
    return _out(sp.eye(n, n - 1, format="csr"), sparse)


def shift_embedding(level: int, sparse=False):
    n = 2**level
    return _out(sp.eye(n, n - 1, k=-1, format="csr"), sparse)


def _endpoint_values(level: int):
    # rows (cell, t): t=0 is the right endpoint value (I), t=1 the left one (N)
    n = 2**level
    rows = np.concatenate([2 * np.arange(n - 1), 2 * np.arange(1, n) + 1])
    cols = np.concatenate([np.arange(n - 1), np.arange(n - 1)])
    return sp.csr_matrix((np.ones(2 * (n - 1)), (rows, cols)), shape=(2 * n, n - 1))


def R1d(level: int, sparse=False):
    """Coefficients of a nodal function in the cellwise orthonormal basis."""
    M = 2.0 ** (-level / 2) * sp.kron(sp.eye(2**level), sp.csr_matrix(B_R)) @ _endpoint_values(level)
    return _out(M, sparse)


def C1d(level: int, sparse=False):
    """Coefficients of the derivative of a nodal function."""
    M = 2.0 ** (level / 2) * sp.kron(sp.eye(2**level), sp.csr_matrix(B_C)) @ _endpoint_values(level)
    M.eliminate_zeros()
    return _out(M, sparse)


def T1d(level: int, sparse=False):
    """Refinement Q_l -> Q_{l+1} in one dimension (orthonormal columns)."""
    return _out(sp.kron(sp.eye(2**level), sp.csr_matrix(T_LOCAL)), sparse)


def T1d_chain(level: int, L: int, sparse=False):
    M = sp.eye(2 ** (level + 1), format="csr")
    for m in range(level, L):
        M = T1d(m, sparse=True) @ M
    return _out(M, sparse)


def prolongation1d(level: int, L: int, sparse=False):
    """Linear interpolation V_l -> V_L in one dimension."""
    P = sp.eye(2**level - 1, format="csr")
    for m in range(level, L):
        n = 2**m - 1
        j = np.arange(n)
        rows = np.concatenate([2 * j + 1, 2 * j, 2 * j + 2])
        cols = np.concatenate([j, j, j])
        vals = np.concatenate([np.ones(n), 0.5 * np.ones(n), 0.5 * np.ones(n)])
        P = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n + 1, n)) @ P
    return _out(P, sparse)


# ------------------------------------------------------- d-dimensional pieces

def _kron_all(mats):
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out.tocsr()


def _interleaved_to_grouped(n: int, d: int) -> np.ndarray:
    """Index map from rows (j1,k1,...,jd,kd) to rows (j1..jd, k1..kd).

    ``grouped = interleaved[perm]``.
    """
    shape = (n,) * d + (2,) * d
    idx = np.indices(shape).reshape(2 * d, -1)
    js, ks = idx[:d], idx[d:]
    old = np.zeros(idx.shape[1], dtype=np.int64)
    for i in range(d):
        old = old * (2 * n) + js[i] * 2 + ks[i]
    return old


def grad_factor(d: int, level: int, sparse=False):
    """C_l: nodal values on level l to cellwise gradient coefficients.

    Block ``s`` is R x ... x C (position s) x ... x R, rows ordered |j>|s>|k>.
    """
    n = 2**level
    R, C = R1d(level, sparse=True), C1d(level, sparse=True)
    perm = _interleaved_to_grouped(n, d)
    cols = (n - 1) ** d
    blocks = []
    for s in range(d):
        X = _kron_all([C if i == s else R for i in range(d)])[perm]
        blocks.append(X)
    # interleave the s index between the cell and k indices
    M = sp.vstack(blocks).tocsr()  # rows (s, j, k)
    nj, nk = n**d, 2**d
    idx = np.arange(d * nj * nk).reshape(d, nj, nk)  # position in M
    order = idx.transpose(1, 0, 2).reshape(-1)
    M = M[order]
    assert M.shape == (nj * d * nk, cols)
    return _out(M, sparse)


def transfer(d: int, level: int, L: int, sparse=False):
    """T_{l,L}: Q_l^(cells x k) -> Q_L, rows and columns ordered |j>|k>."""
    T = T1d_chain(level, L, sparse=True)
    K = _kron_all([T] * d)
    rp = _interleaved_to_grouped(2**L, d)
    cp = _interleaved_to_grouped(2**level, d)
    return _out(K[rp][:, cp], sparse)


def transfer_with_direction(d: int, level: int, L: int, sparse=False):
    """T_{l,L} acting on |j>|s>|k> with the direction index passed through."""
    T = transfer(d, level, L, sparse=True).tocoo()
    nk = 2**d
    nj_out, nj_in = 2 ** (d * L), 2 ** (d * level)
    ro_j, ro_k = np.divmod(T.row, nk)
    co_j, co_k = np.divmod(T.col, nk)
    rows, cols, vals = [], [], []
    for s in range(d):
        rows.append((ro_j * d + s) * nk + ro_k)
        cols.append((co_j * d + s) * nk + co_k)
        vals.append(T.data)
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nj_out * d * nk, nj_in * d * nk),
    )
    return _out(M, sparse)


def prolongation(d: int, level: int, L: int, sparse=False):
    return _out(_kron_all([prolongation1d(level, L, sparse=True)] * d), sparse)


def generating_system(spec: LevelSpec, sparse=False):
    """F = [2^(-l(2-d)/2) P_l]_{l=1..L}: the BPX frame, F F^T = P."""
    spec.check_size()
    blocks = [level_scale(spec.d, l) * prolongation(spec.d, l, spec.L, sparse=True) for l in range(1, spec.L + 1)]
    return _out(sp.hstack(blocks).tocsr(), sparse)


def preconditioned_gradient(spec: LevelSpec, sparse=False):
    """C_F = [2^(-l(2-d)/2) T~_{l,L} C_l]_{l=1..L}, equal to C_L F."""
    spec.check_size()
    d, L = spec.d, spec.L
    blocks = [
        level_scale(d, l) * (transfer_with_direction(d, l, L, sparse=True) @ grad_factor(d, l, sparse=True))
        for l in range(1, L + 1)
    ]
    return _out(sp.hstack(blocks).tocsr(), sparse)


def level_blocks(spec: LevelSpec) -> list[slice]:
    """Column slices of each level inside the frame domain."""
    out, start = [], 0
    for l in range(1, spec.L + 1):
        n = spec.n_nodes(l)
        out.append(slice(start, start + n))
        start += n
    return out


# --------------------------------------------------------------- coefficient

@dataclass
class Coefficient:
    """Piecewise constant SPD coefficient on the cells of the finest grid.

    ``values`` has shape (n_cells,) for a scalar coefficient or
    (n_cells, d, d) for a matrix-valued one.
    """

    d: int
    L: int
    values: np.ndarray
    alpha: float
    beta: float

    @property
    def is_scalar(self) -> bool:
        return self.values.ndim == 1

    def cell_matrices(self) -> np.ndarray:
        if self.is_scalar:
            return self.values[:, None, None] * np.eye(self.d)
        return self.values

    @classmethod
    def constant(cls, d: int, L: int, value: float = 1.0) -> "Coefficient":
        return cls.from_callable(lambda x: value, d, L)

    @classmethod
    def from_callable(cls, fun: Callable, d: int, L: int) -> "Coefficient":
        mids = cell_midpoints(d, L)
        vals = [np.asarray(fun(x), dtype=float) for x in mids]
        arr = np.array(vals)
        if arr.ndim == 1:
            if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
                raise ValueError("coefficient is not positive on every cell")
            return cls(d, L, arr, float(arr.min()), float(arr.max()))
        if arr.shape[1:] != (d, d):
            raise ValueError(f"matrix coefficient must be {d}x{d}")
        if not np.allclose(arr, arr.transpose(0, 2, 1)):
            raise ValueError("coefficient is not symmetric")
        ev = np.linalg.eigvalsh(arr)
        if np.any(ev <= 0):
            bad = int(np.argmin(ev.min(axis=1)))
            raise ValueError(f"coefficient is not positive definite on cell {bad}")
        return cls(d, L, arr, float(ev.min()), float(ev.max()))


def cell_midpoints(d: int, L: int) -> np.ndarray:
    n = 2**L
    c = (np.arange(n) + 0.5) / n
    grids = np.meshgrid(*([c] * d), indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def coefficient_diagonal(coef: Coefficient, sparse=False):
    """D_A (x) Id_{2^d}, acting on rows |j>|s>|k>."""
    nk = 2**coef.d
    blocks = [sp.kron(sp.csr_matrix(A), sp.eye(nk)) for A in coef.cell_matrices()]
    return _out(sp.block_diag(blocks, format="csr"), sparse)


# ------------------------------------------------------------------ systems

def assemble_stiffness(spec: LevelSpec, coef: Coefficient | None = None, sparse=False):
    """S = C_L^T (D_A x Id) C_L."""
    spec.check_size()
    C = grad_factor(spec.d, spec.L, sparse=True)
    if coef is None:
        return _out(C.T @ C, sparse)
    return _out(C.T @ coefficient_diagonal(coef, sparse=True) @ C, sparse)


def assemble_stiffness_galerkin(spec: LevelSpec, coef: Coefficient | None = None):
    """Element-by-element Q1 stiffness assembly, independent of the factors."""
    spec.check_size()
    d, L = spec.d, spec.L
    n = 2**L
    h = 1.0 / n
    A = coef.cell_matrices() if coef is not None else np.broadcast_to(np.eye(d), (n**d, d, d))
    # reference gradients of the 2^d local basis functions at 2-point Gauss nodes
    g = np.array([0.5 - 0.5 / SQ3, 0.5 + 0.5 / SQ3])
    corners = np.array(np.unravel_index(np.arange(2**d), (2,) * d)).T  # (2^d, d)
    qpts = np.array(np.meshgrid(*([g] * d), indexing="ij")).reshape(d, -1).T
    w = 1.0 / len(qpts)
    grads = np.zeros((len(qpts), 2**d, d))
    for q, y in enumerate(qpts):
        for a, c in enumerate(corners):
            phi = np.where(c == 1, y, 1 - y)
            for s in range(d):
                dphi = 1.0 if c[s] == 1 else -1.0
                grads[q, a, s] = dphi * np.prod(np.delete(phi, s)) / h
    vol = h**d
    N = n - 1
    S = np.zeros((N**d, N**d))
    for cell in range(n**d):
        cidx = np.array(np.unravel_index(cell, (n,) * d))
        Ke = vol * w * np.einsum("qas,st,qbt->ab", grads, A[cell], grads)
        vidx = cidx[None, :] + corners - 1  # node index of each corner
        ok = np.all((vidx >= 0) & (vidx < N), axis=1)
        glob = np.ravel_multi_index(vidx[ok].T, (N,) * d) if ok.any() else np.array([], int)
        S[np.ix_(glob, glob)] += Ke[np.ix_(ok, ok)]
    return S


def _gauss4():
    x, w = np.polynomial.legendre.leggauss(4)
    return 0.5 * (x + 1), 0.5 * w


def load_vector(f: Callable, d: int, level: int) -> np.ndarray:
    """r_j = (Lambda_j, f) on level ``level``, 4-point Gauss per cell and axis."""
    n = 2**level
    h = 1.0 / n
    x, w = _gauss4()
    corners = np.array(np.unravel_index(np.arange(2**d), (2,) * d)).T
    qy = np.array(np.meshgrid(*([x] * d), indexing="ij")).reshape(d, -1).T
    qw = np.prod(np.array(np.meshgrid(*([w] * d), indexing="ij")).reshape(d, -1), axis=0)
    # basis value of each corner at each quadrature point
    phi = np.prod(np.where(corners[None, :, :] == 1, qy[:, None, :], 1 - qy[:, None, :]), axis=2)
    N = n - 1
    r = np.zeros((N,) * d)
    cells = np.array(np.unravel_index(np.arange(n**d), (n,) * d)).T
    for cidx in cells:
        pts = (cidx[None, :] + qy) * h
        fv = np.array([f(p) for p in pts], dtype=float)
        contrib = (h**d) * (qw * fv) @ phi
        for a, c in enumerate(corners):
            v = cidx + c - 1
            if np.all((v >= 0) & (v < N)):
                r[tuple(v)] += contrib[a]
    return r.reshape(-1)


def preconditioned_system(spec: LevelSpec, coef: Coefficient | None = None):
    """F^T S F assembled as C_F^T (D_A x Id) C_F."""
    CF = preconditioned_gradient(spec, sparse=True)
    if coef is None:
        return (CF.T @ CF).toarray()
    return (CF.T @ coefficient_diagonal(coef, sparse=True) @ CF).toarray()


def effective_condition(M: np.ndarray, rtol: float = 1e-10) -> float:
    """sigma_max / sigma_min over the nonzero singular values."""
    s = np.linalg.svd(np.asarray(M), compute_uv=False)
    s = s[s > rtol * s[0]]
    return float(s[0] / s[-1])


def kernel_dimension(M: np.ndarray, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(np.asarray(M), compute_uv=False)
    return int(np.sum(s <= rtol * s[0]) + max(0, M.shape[1] - len(s)))


def qoi_reference(S: np.ndarray, m: np.ndarray, r: np.ndarray) -> float:
    return float(m @ np.linalg.solve(S, r))


def write_matrix_csv(path, M: np.ndarray):
    M = np.asarray(M)
    with open(path, "w") as fh:
        fh.write(f"{M.shape[0]},{M.shape[1]}\n")
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows, cols = (int(v) for v in fh.readline().split(","))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return data.reshape(rows, cols)
