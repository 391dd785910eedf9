import numpy as np
import pytest

from qfem import encoding as E
from qfem import fem
from qfem import solver as S


def test_paper_parameters():
    p = S.inverse_poly(2.8, 0.1)
    assert (p.K, p.J) == (27, 14)
    assert S.poly_error_profile(p) <= 0.1


@pytest.mark.parametrize("kappa,tol", [(2.8, 0.1), (4.0, 2**-8), (30.0, 1e-3)])
def test_polynomial_odd_and_bounded(kappa, tol):
    p = S.inverse_poly(kappa, tol)
    z = np.linspace(-1, 1, 10_000)
    assert np.abs(p(z)).max() <= 1 + 1e-12
    assert np.allclose(p(-z), -p(z))
    assert p(np.array([0.0]))[0] == 0


def test_tail_coefficients_match_closed_form():
    K, J = 12, 11
    c = S.tail_coefficients(K, J)
    z = np.linspace(0.05, 1, 50)
    exact = (1 - (1 - z**2) ** K) / z
    assert np.abs(S.eval_odd_chebyshev(c, z) - exact).max() < 1e-12


def test_large_k_uses_survival_function():
    K = S.EXACT_BINOMIAL_MAX_K + 10
    c = S.tail_coefficients(K, 5)
    assert np.all(np.isfinite(c)) and abs(c[0]) < 4


@pytest.mark.parametrize("seed", range(5))
def test_recurrence_matches_svd(seed):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(2, 65)), int(rng.integers(2, 49))
    M = rng.normal(size=(m, n))
    M /= np.linalg.norm(M, 2)
    v = rng.normal(size=n)
    coeffs = rng.normal(size=int(rng.integers(1, 12)))
    assert np.abs(S.apply_poly_matrix(coeffs, M, v) - S.apply_poly_svd(coeffs, M, v)).max() < 1e-8


def test_kernel_components_are_annihilated():
    system = S.build_system(S.QoIProblem(1, 4))
    M = system.Y.toarray() / system.gamma
    _, s, Vt = np.linalg.svd(M)
    kernel = Vt[np.sum(s > 1e-10):]
    assert len(kernel) > 0
    p = S.inverse_poly(3.0, 0.05)
    v = system.r_t
    w = v + 0.7 * kernel[0] - 0.3 * kernel[-1]
    assert np.abs(S.apply_poly_matrix(p, M, v) - S.apply_poly_matrix(p, M, w)).max() < 1e-9


@pytest.mark.parametrize("d,L", [(1, 3), (1, 5), (2, 2), (2, 3)])
def test_emulation_within_tolerance(d, L):
    res = S.qoi_pipeline(S.QoIProblem(d, L), "emulation", tol=2.0**-L)
    assert res.rel_error <= 2.0**-L


def test_emulation_matrix_coefficient():
    coef = fem.Coefficient.from_callable(lambda x: np.array([[2.0, 0.3], [0.3, 1.0 + x[0]]]), 2, 3)
    pr = S.QoIProblem(2, 3, coef=coef)
    res = S.qoi_pipeline(pr, "emulation", tol=2.0**-6)
    assert res.rel_error <= 2.0**-6


def test_norm_estimator_emulation():
    res = S.qoi_pipeline(S.QoIProblem(1, 4), "emulation", tol=2.0**-6, estimator="norm")
    assert res.rel_error <= 2.0**-6


def test_lcu_circuit_encodes_polynomial():
    pr = S.QoIProblem(1, 2)
    U = S.build_U_Y(pr)
    coeffs = S.inverse_poly(2.5, 0.2, J=3).scaled
    pc = S.lcu_poly_circuit(U, coeffs)
    M = fem.preconditioned_gradient(pr.spec) / U.gamma
    got = E.extract_matrix(pc.encoding)
    ref = np.column_stack([S.apply_poly_svd(coeffs, M, e) for e in np.eye(M.shape[1])])
    assert np.abs(got - ref).max() < 1e-10


def test_qsvt_chebyshev_phases():
    d = 5
    phases = np.array([(1 - d) * np.pi / 2] + [np.pi / 2] * (d - 1))
    z = np.linspace(-1, 1, 9)
    assert np.allclose(S.qsvt_poly_values(phases, z), np.cos(d * np.arccos(z)))
    pr = S.QoIProblem(1, 2)
    U = S.build_U_Y(pr)
    pc = S.qsvt_circuit(U, phases)
    M = fem.preconditioned_gradient(pr.spec) / U.gamma
    ref = np.column_stack([S.apply_poly_svd(np.array([0, 0, 1.0]), M, e) for e in np.eye(M.shape[1])])
    assert np.abs(E.extract_matrix(pc.encoding) - ref).max() < 1e-10


def test_phase_file(tmp_path):
    p = tmp_path / "ph.txt"
    p.write_text("0.1\n0.2\n0.3\n")
    assert np.allclose(S.read_phases(p), [0.1, 0.2, 0.3])
    p.write_text("0.1\n0.2\n")
    with pytest.raises(ValueError):
        S.read_phases(p)


@pytest.mark.parametrize("estimator", ["hadamard", "norm"])
def test_exact_circuit_matches_emulation(estimator):
    pr = S.QoIProblem(1, 3)
    em = S.qoi_pipeline(pr, "emulation", tol=0.125, estimator=estimator)
    ex = S.qoi_pipeline(pr, "exact", tol=0.125, estimator=estimator)
    assert abs(ex.estimate - em.estimate) <= 1e-6 * abs(em.estimate)


def test_sampled_reproducible_and_shot_scaling():
    pr = S.QoIProblem(1, 2)
    a = S.qoi_pipeline(pr, "sampled", tol=0.25, shots=1000, seed=3)
    b = S.qoi_pipeline(pr, "sampled", tol=0.25, shots=1000, seed=3)
    assert a.estimate == b.estimate
    sd = {}
    for shots in (400, 40_000):
        est = [S.qoi_pipeline(pr, "sampled", tol=0.25, shots=shots, seed=s).estimate for s in range(30)]
        sd[shots] = np.std(est)
    assert 4 < sd[400] / sd[40_000] < 25


def test_kappa_search_small_levels():
    for pre in (True, False):
        r = S.kappa_eff_search(S.QoIProblem(1, 3), 2.0**-3, preconditioned=pre)
        assert r.rel_error <= 2.0**-3 and r.J <= 10


def test_ledger_rejects_bad_factor():
    with pytest.raises(ValueError):
        S.ScaleLedger().add("zero", 0.0)
