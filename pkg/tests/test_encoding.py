"""Randomized checks of the block-encoding calculus against dense linear algebra."""
import numpy as np
import pytest
from scipy.linalg import block_diag

from qfem import encoding as E
from qfem import sim

N_RANDOM = 100
TOL = 1e-10


def rand_enc(rng, m=None, n=None):
    m = int(rng.integers(1, 6)) if m is None else m
    n = int(rng.integers(1, 6)) if n is None else n
    A = rng.normal(size=(m, n))
    gamma = np.linalg.norm(A, 2) * (1 + rng.random())
    return A, E.encode_matrix(A, gamma)


def check(enc, ref):
    got = E.extract_matrix(enc)
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() <= TOL * max(1.0, np.abs(ref).max())
    U = sim.unitary(enc.circuit)
    assert np.abs(U.conj().T @ U - np.eye(len(U))).max() <= TOL
    if enc.subnorm_bound is not None:
        assert E.measured_subnormalization(enc) <= enc.subnorm_bound * (1 + 1e-9)


def cases(rule):
    return [np.random.default_rng([hash(rule) % 2**32, i]) for i in range(N_RANDOM)]


@pytest.mark.parametrize("rule", ["tensor"])
def test_tensor(rule):
    for rng in cases(rule):
        A, ea = rand_enc(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        B, eb = rand_enc(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        check(E.tensor(ea, eb), np.kron(A, B))


def test_adjoint():
    for rng in cases("adjoint"):
        A, ea = rand_enc(rng)
        check(E.adjoint(ea), A.T)


def test_scale():
    for rng in cases("scale"):
        A, ea = rand_enc(rng)
        c = 0.1 + 3 * rng.random()
        check(E.scale(ea, c), c * A)


def test_multiply():
    for rng in cases("multiply"):
        m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
        A, ea = rand_enc(rng, m, k)
        B, eb = rand_enc(rng, k, n)
        check(E.multiply(ea, eb), A @ B)


def test_multiply_chain_with_identity():
    for rng in cases("chain"):
        A, ea = rand_enc(rng, 4, 4)
        B, eb = rand_enc(rng, 4, int(rng.integers(1, 5)))
        check(E.multiply(E.multiply(ea, E.identity(2)), eb), A @ B)


def test_block_diag():
    for rng in cases("block_diag"):
        A, ea = rand_enc(rng)
        B, eb = rand_enc(rng)
        check(E.block_diag(ea, eb), block_diag(A, B))


def test_vstack():
    for rng in cases("vstack"):
        n = int(rng.integers(1, 5))
        parts = [rand_enc(rng, int(rng.integers(1, 4)), n) for _ in range(int(rng.integers(2, 4)))]
        check(E.vstack([e for _, e in parts]), np.vstack([a for a, _ in parts]))


def test_hconcat():
    for rng in cases("hconcat"):
        m = int(rng.integers(1, 5))
        parts = [rand_enc(rng, m, int(rng.integers(1, 4))) for _ in range(int(rng.integers(2, 4)))]
        check(E.hconcat([e for _, e in parts]), np.hstack([a for a, _ in parts]))


def test_add():
    for rng in cases("add"):
        m, n = (int(v) for v in rng.integers(1, 5, size=2))
        A, ea = rand_enc(rng, m, n)
        B, eb = rand_enc(rng, m, n)
        ma, mb = rng.normal(size=2)
        check(E.add(ea, eb, ma, mb), ma * A + mb * B)


def test_controlled_block_diag():
    for rng in cases("controlled_block_diag"):
        w = int(rng.integers(1, 3))
        nb = int(rng.integers(1, 2**w + 1))
        m, n = (int(v) for v in rng.integers(1, 4, size=2))
        mats = [rng.normal(size=(m, n)) for _ in range(nb)]
        gamma = max(np.linalg.norm(a, 2) for a in mats) * (1 + rng.random())
        enc = E.controlled_block_diag(w, lambda j: E.encode_matrix(mats[j], gamma), nb)
        check(enc, block_diag(*mats))


def test_block_diag_matrices():
    for rng in cases("block_diag_matrices"):
        m = int(rng.integers(1, 5))
        mats = [rng.normal(size=(m, m)) for _ in range(int(rng.integers(1, 4)))]
        check(E.block_diag_matrices(mats), block_diag(*mats))


def test_nested_compositions():
    for rng in cases("nested")[:30]:
        A, ea = rand_enc(rng, 2, 3)
        B, eb = rand_enc(rng, 3, 2)
        C, ec = rand_enc(rng, 2, 2)
        check(E.add(E.multiply(ea, eb), E.adjoint(ec), 0.5, -1.5), 0.5 * A @ B - 1.5 * C.T)
        check(E.hconcat([E.multiply(eb, ea), eb]), np.hstack([B @ A, B]))
        check(E.tensor(E.vstack([eb, ec]), E.adjoint(ec)), np.kron(np.vstack([B, C]), C.T))
        check(E.vstack([E.multiply(ea, eb), ec]), np.vstack([A @ B, C]))
        check(E.vstack([ec, E.multiply(ea, eb)]), np.vstack([C, A @ B]))


def test_register_width_canonical():
    b = E.Branch((((0, 1, 2), 3),))
    assert b.registers == (((0, 1), 3),)
    assert b.member(np.array([4])).tolist() == [False]


def test_encode_unitary_circuit_and_matrix():
    rng = np.random.default_rng(0)
    Q = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    check(E.encode_unitary(Q), Q)
    with pytest.raises(ValueError):
        E.encode_unitary(np.ones((4, 4)))


def test_encode_matrix_rejects_small_gamma():
    with pytest.raises(ValueError):
        E.encode_matrix(np.eye(2) * 3, 1.0)


def test_shape_mismatch_raises():
    rng = np.random.default_rng(1)
    _, ea = rand_enc(rng, 2, 3)
    _, eb = rand_enc(rng, 4, 2)
    with pytest.raises(E.IncompatibleProjection):
        E.multiply(ea, eb)
    with pytest.raises(E.IncompatibleProjection):
        E.add(ea, eb)


def test_cnot_pi_flags_exactly_the_projection():
    p = E.Projection((E.Branch((((0, 1), 3),)), E.Branch((((0,), 2),), frozenset({2}))))
    c = E.cnot_pi_circuit(p, 3)
    U = sim.unitary(c)
    member = set(p.indices().tolist())
    for i in range(8):
        out = int(np.argmax(np.abs(U[:, i])))
        assert out == (i | 8 if i in member else i)


def test_lt_terms_cover_exactly():
    for n in range(1, 5):
        qs = tuple(range(n))
        for bound in range(0, 2**n + 1):
            hit = np.zeros(2**n, int)
            for cond in E.lt_terms(qs, bound):
                for v in range(2**n):
                    if all(((v >> q) & 1) == b for q, b in cond.items()):
                        hit[v] += 1
            assert np.array_equal(hit, (np.arange(2**n) < bound).astype(int))
