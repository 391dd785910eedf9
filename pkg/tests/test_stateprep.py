import numpy as np
import pytest

from qfem import fem, sim
from qfem import stateprep as SP
from qfem.preconditioned import build_U_CF_optimized


def test_amplitude_table_sums():
    v = np.array([0.5, -0.5, 0.1, 0.7])
    t = SP.AmplitudeTable.from_vector(v)
    assert np.allclose(t.g[0], [np.sum(v**2)])
    assert np.allclose(t.g[1], [0.5, 0.5])
    assert np.allclose(t.g[2], v**2)


@pytest.mark.parametrize("seed", range(10))
def test_prepare_random_vectors(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    v = rng.normal(size=2**n)
    v[rng.random(2**n) < 0.3] = 0
    if not v.any():
        v[0] = 1
    psi = sim.simulate(SP.prepare_circuit(v))
    assert np.abs(psi - v / np.linalg.norm(v)).max() < 1e-12


def test_prepare_pads_short_vectors():
    gates = SP.prepare_amplitudes(np.array([1.0, 2.0, 2.0]), [1, 0])
    from qfem.circuit import Circuit
    c = Circuit(2)
    c.extend(gates)
    assert np.allclose(sim.simulate(c), [1 / 3, 2 / 3, 2 / 3, 0])


def test_table_csv(tmp_path):
    t = SP.AmplitudeTable.from_vector(np.array([0.6, 0.8]))
    p = tmp_path / "t.csv"
    SP.write_table_csv(p, t)
    lines = p.read_text().splitlines()
    assert lines[0] == "k,x,g_k" and len(lines) == 4


@pytest.mark.parametrize("d,level", [(1, 1), (1, 3), (2, 2)])
@pytest.mark.parametrize("f", [lambda p: 1.0, lambda p: p[0], lambda p: np.exp(p.sum())])
def test_node_inner_products_match_load_vector(d, level, f):
    assert np.abs(SP.node_inner_products(f, d, level) - fem.load_vector(f, d, level)).max() < 1e-13


@pytest.mark.parametrize("d,level", [(1, 3), (2, 2)])
def test_prefix_sums_are_block_sums(d, level):
    f = lambda p: 1 + p[0] ** 2 + (p[1] if d > 1 else 0)
    r = fem.load_vector(f, d, level).reshape((2**level - 1,) * d)
    n = d * level
    for k in range(n + 1):
        for x in range(2**k):
            ranges = SP.prefix_node_ranges(d, level, k, x)
            sl = tuple(slice(lo, hi + 1) for lo, hi in ranges)
            assert abs(SP.half_hat_sums(f, d, level, k, x) - r[sl].sum()) < 1e-13


def test_parse_rhs():
    assert SP.parse_rhs("const:2")(np.array([0.3])) == 2
    assert np.isclose(SP.parse_rhs("poly:1,0,3")(np.array([0.5])), 1.75)
    assert np.isclose(SP.parse_rhs("poly:0,1")(np.array([0.5, 0.4])), 0.2)
    with pytest.raises(ValueError):
        SP.parse_rhs("sin:1")


@pytest.mark.parametrize("L", [1, 2, 3, 4])
@pytest.mark.parametrize("spec", ["const:1", "poly:0,1"])
def test_preconditioned_rhs_state(L, spec):
    f = SP.parse_rhs(spec)
    U = build_U_CF_optimized(1, L)
    vec = SP.frame_rhs(f, 1, L)
    ps = SP.prepare_in_projection(vec, U.proj_in, U.n_qubits, list(reversed(U.info["layout"].lvl)))
    psi = sim.simulate(ps.circuit)
    dense = fem.generating_system(fem.LevelSpec(1, L)).T @ fem.load_vector(f, 1, L)
    assert np.isclose(ps.norm, np.linalg.norm(dense))
    assert np.abs(psi[U.proj_in.indices()] - dense / np.linalg.norm(dense)).max() < 1e-10
    assert np.isclose(np.linalg.norm(psi[U.proj_in.indices()]), 1.0)
