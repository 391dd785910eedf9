import numpy as np
import pytest

from qfem import encoding as E
from qfem import fem
from qfem import preconditioned as P
from qfem import sim


def close(enc, ref, tol=1e-9):
    got = E.extract_matrix(enc)
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() < tol


@pytest.mark.parametrize("kind", ["R", "C"])
@pytest.mark.parametrize("level", [1, 2, 3])
def test_1d_factors(kind, level):
    ref = fem.R1d(level) if kind == "R" else fem.C1d(level)
    close(P.build_1d(kind, level), ref)


@pytest.mark.parametrize("d,level", [(1, 1), (1, 3), (2, 1), (2, 2), (3, 1)])
def test_gradient(d, level):
    U = P.build_U_grad(d, level)
    close(U, fem.grad_factor(d, level))
    assert np.isclose(U.gamma * fem.level_scale(d, level), 2 * np.sqrt(d))
    assert np.isclose(P.grad_norm(d, level), np.linalg.norm(fem.grad_factor(d, level), 2))
    assert E.measured_subnormalization(U) <= U.subnorm_bound * (1 + 1e-9)


@pytest.mark.parametrize("d,level,L", [(1, 1, 3), (1, 2, 4), (2, 1, 2)])
def test_transfer(d, level, L):
    close(P.build_U_transfer(d, level, L), fem.transfer(d, level, L))
    close(P.build_U_transfer(d, level, L, with_direction=True), fem.transfer_with_direction(d, level, L))


@pytest.mark.parametrize("d,L", [(1, 1), (1, 2), (1, 3), (1, 4), (2, 1), (2, 2)])
def test_cf_paths_match_dense(d, L):
    ref = fem.preconditioned_gradient(fem.LevelSpec(d, L))
    G = P.build_U_CF(d, L)
    O = P.build_U_CF_optimized(d, L)
    close(G, ref)
    close(O, ref)
    assert np.abs(E.extract_matrix(G) - E.extract_matrix(O)).max() < 1e-9
    assert np.isclose(O.gamma, 2 * np.sqrt(d * L))
    assert E.measured_subnormalization(O) <= O.subnorm_bound * (1 + 1e-9)


def test_cf_optimized_non_power_of_two_levels():
    close(P.build_U_CF_optimized(1, 5), fem.preconditioned_gradient(fem.LevelSpec(1, 5)))
    close(P.build_U_CF_optimized(2, 3), fem.preconditioned_gradient(fem.LevelSpec(2, 3)))


def test_optimized_is_smaller():
    g = P.build_U_CF(1, 4).circuit.stats()
    o = P.build_U_CF_optimized(1, 4).circuit.stats()
    assert o["qubits"] <= 13 and o["two_qubit"] < g["two_qubit"]


def test_optimized_unitary():
    U = sim.unitary(P.build_U_CF_optimized(1, 2).circuit)
    assert np.abs(U.conj().T @ U - np.eye(len(U))).max() < 1e-10


def test_coefficient_encoding():
    coef = fem.Coefficient.from_callable(lambda x: 1 + x[0] ** 2, 1, 3)
    U = P.build_U_DA(coef)
    close(U, fem.coefficient_diagonal(coef))
    const = P.build_U_DA(fem.Coefficient.constant(2, 2, 3.0))
    assert len(const.circuit.gates) == 0
    close(const, 3.0 * np.eye(2**2 * 2**2 * 2 * 4))


def test_matrix_coefficient_rejected():
    coef = fem.Coefficient.from_callable(lambda x: np.array([[2.0, 0.1], [0.1, 1.0]]), 2, 1)
    with pytest.raises(P.NonScalarCoefficient):
        P.build_U_DA(coef)


@pytest.mark.parametrize("d,L", [(1, 1), (1, 2), (2, 1)])
def test_stiffness_sandwich(d, L):
    coef = fem.Coefficient.from_callable(lambda x: 1.5 + np.sin(3 * x[0]), d, L)
    CF = P.build_U_CF_optimized(d, L)
    DA = P.build_U_DA(coef)
    S = P.stiffness_sandwich(CF, DA)
    close(S, fem.preconditioned_system(fem.LevelSpec(d, L), coef))
    assert np.isclose(S.gamma, 4 * coef.beta * d * L)
    sub = E.measured_subnormalization(S)
    assert sub <= S.subnorm_bound * (1 + 1e-9)
    assert sub <= coef.beta / coef.alpha * DA.subnorm_bound * d * (L + np.pi**2 / 4)
