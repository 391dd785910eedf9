import numpy as np
import pytest

from qfem import fem


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("d,L", [(1, 1), (1, 3), (1, 5), (2, 1), (2, 3)])
def test_factorized_stiffness_matches_galerkin(d, L):
    spec = fem.LevelSpec(d, L)
    assert rel(fem.assemble_stiffness(spec), fem.assemble_stiffness_galerkin(spec)) < 1e-12


def test_1d_stiffness_is_tridiagonal_laplacian():
    S = fem.assemble_stiffness(fem.LevelSpec(1, 3))
    n = 7
    ref = 8 * (2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1))
    assert np.allclose(S, ref)


def test_variable_coefficient_matches_galerkin():
    spec = fem.LevelSpec(2, 2)
    coef = fem.Coefficient.from_callable(lambda x: 1 + x[0] + 2 * x[1] ** 2, 2, 2)
    assert rel(fem.assemble_stiffness(spec, coef), fem.assemble_stiffness_galerkin(spec, coef)) < 1e-12
    mat = fem.Coefficient.from_callable(lambda x: np.array([[2.0, 0.5], [0.5, 1.0 + x[0]]]), 2, 2)
    assert rel(fem.assemble_stiffness(spec, mat), fem.assemble_stiffness_galerkin(spec, mat)) < 1e-12


def test_coefficient_validation():
    with pytest.raises(ValueError):
        fem.Coefficient.from_callable(lambda x: -1.0, 1, 2)
    with pytest.raises(ValueError):
        fem.Coefficient.from_callable(lambda x: np.array([[1.0, 2.0], [2.0, 1.0]]), 2, 1)


@pytest.mark.parametrize("d,L", [(1, 4), (2, 2), (3, 1)])
def test_preconditioned_gradient_is_gradient_times_frame(d, L):
    spec = fem.LevelSpec(d, L)
    CF = fem.preconditioned_gradient(spec)
    ref = fem.grad_factor(d, L) @ fem.generating_system(spec)
    assert np.abs(CF - ref).max() < 1e-12


def test_transfer_reproduces_prolongation():
    # T~ C_l = C_L P_l for each level
    for d in (1, 2):
        for l in (1, 2):
            lhs = fem.transfer_with_direction(d, l, 3) @ fem.grad_factor(d, l)
            rhs = fem.grad_factor(d, 3) @ fem.prolongation(d, l, 3)
            assert np.abs(lhs - rhs).max() < 1e-12


def test_transfer_is_isometry():
    T = fem.transfer(1, 1, 4)
    assert np.allclose(T.T @ T, np.eye(T.shape[1]))


def test_bpx_condition_bounded_while_stiffness_grows():
    kp = [fem.effective_condition(fem.preconditioned_system(fem.LevelSpec(1, L))) for L in range(5, 9)]
    ks = [np.linalg.cond(fem.assemble_stiffness(fem.LevelSpec(1, L))) for L in range(3, 8)]
    assert max(kp) / min(kp) < 1.5
    assert all(b / a > 3.5 for a, b in zip(ks, ks[1:]))


def test_frame_kernel_dimension():
    spec = fem.LevelSpec(1, 3)
    M = fem.preconditioned_system(spec)
    assert fem.kernel_dimension(M) == spec.dim_frame() - spec.n_nodes()


def test_load_vector_constant_and_linear():
    r = fem.load_vector(lambda p: 1.0, 1, 3)
    assert np.allclose(r, 1 / 8)
    x = (np.arange(7) + 1) / 8
    assert np.allclose(fem.load_vector(lambda p: p[0], 1, 3), x / 8)


def test_qoi_converges_to_one_twelfth():
    spec = fem.LevelSpec(1, 8)
    S = fem.assemble_stiffness(spec)
    r = fem.load_vector(lambda p: 1.0, 1, 8)
    m = np.full(spec.n_nodes(), spec.h())
    assert abs(fem.qoi_reference(S, m, r) - 1 / 12) < 1e-4


def test_size_guard():
    with pytest.raises(ValueError):
        fem.LevelSpec(2, 9).check_size()


def test_matrix_csv_roundtrip(tmp_path):
    M = np.random.default_rng(0).normal(size=(3, 5))
    p = tmp_path / "m.csv"
    fem.write_matrix_csv(p, M)
    assert p.read_text().splitlines()[0] == "3,5"
    assert np.array_equal(fem.read_matrix_csv(p), M)
