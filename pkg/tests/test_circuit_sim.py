import numpy as np
import pytest

from qfem import circuit as C
from qfem import sim
from qfem.stateprep import prepare_circuit


def random_circuit(n, depth, rng):
    c = C.Circuit(n)
    for _ in range(depth):
        kind = rng.integers(5)
        qs = [int(q) for q in rng.permutation(n)]
        if kind == 0:
            c.append("H", qs[0])
        elif kind == 1:
            c.append("RY", qs[0], controls=qs[1], param=float(rng.normal()))
        elif kind == 2:
            c.append("X", qs[0], controls=qs[1:3], ctrl_state=(1, 0))
        elif kind == 3:
            c.append("INC", tuple(qs[:2]), param=int(rng.integers(1, 4)))
        else:
            c.append("SHIFT", tuple(qs[:3]), param=1)
    return c


def test_basis_convention():
    c = C.Circuit(3).append("X", 1)
    psi = sim.simulate(c)
    assert psi[2] == 1


def test_controlled_gate_unitary():
    c = C.Circuit(2).append("X", 0, controls=1)
    U = sim.unitary(c)
    ref = np.eye(4)[[0, 1, 3, 2]]
    assert np.allclose(U, ref)


def test_inc_and_shift():
    c = C.Circuit(3).append("X", 0).append("INC", (0, 1, 2), param=3)
    assert np.argmax(np.abs(sim.simulate(c))) == 4
    c = C.Circuit(3).append("X", 2).append("SHIFT", (0, 1, 2), param=1)
    assert np.argmax(np.abs(sim.simulate(c))) == 2


@pytest.mark.parametrize("seed", range(5))
def test_inverse_and_unitarity(seed):
    rng = np.random.default_rng(seed)
    c = random_circuit(4, 30, rng)
    U = sim.unitary(c)
    assert np.abs(U.conj().T @ U - np.eye(16)).max() < 1e-10
    assert np.abs(sim.unitary(c.inverse()) @ U - np.eye(16)).max() < 1e-10


def test_dump_roundtrip():
    rng = np.random.default_rng(3)
    c = random_circuit(4, 25, rng)
    c.append("U", (0, 2), controls=(1,), ctrl_state=(0,), matrix=np.linalg.qr(rng.normal(size=(4, 4)))[0])
    c.registers["data"] = (0, 1)
    text = C.dumps(c)
    assert text.splitlines()[0] == "QUBITS 4"
    c2 = C.loads(text)
    assert np.allclose(sim.unitary(c2), sim.unitary(c))
    assert C.dumps(c2) == text


def test_sampling_reproducible_and_unbiased():
    v = np.array([3.0, 1.0, 0.0, 2.0])
    c = prepare_circuit(v)
    a = sim.sample(c, 20000, seed=5)
    assert a == sim.sample(c, 20000, seed=5)
    p = np.array([a.get(k, 0) for k in range(4)]) / 20000
    assert np.abs(p - v**2 / 14).max() < 0.02


def test_counts_csv(tmp_path):
    path = tmp_path / "c.csv"
    sim.write_counts_csv(path, {1: 5, 2: 7}, 3)
    assert path.read_text() == "outcome,count\n001,5\n010,7\n"


def test_noise_zero_matches_exact():
    c = random_circuit(3, 20, np.random.default_rng(1))
    counts = sim.simulate_noisy(c, sim.NoiseModel(0.0), 1000, seed=2, trajectories=4)
    p = sim.probabilities(sim.simulate(c))
    emp = np.zeros(8)
    for k, v in counts.items():
        emp[k] = v / 1000
    assert np.abs(emp - p).max() < 0.06


def test_full_depolarization_limit():
    # many errors drive a Bell pair towards the maximally mixed state
    c = C.Circuit(2).append("H", 0).append("X", 1, controls=0)
    for _ in range(40):
        c.append("X", 1, controls=0)
    counts = sim.simulate_noisy(c, sim.NoiseModel(0.5), 4000, seed=0)
    p = np.array([counts.get(k, 0) for k in range(4)]) / 4000
    assert np.abs(p - 0.25).max() < 0.05


def test_trajectory_cache_equivalence():
    c = random_circuit(4, 40, np.random.default_rng(9))
    a = sim.TrajectoryRunner(c, sim.NoiseModel(0.1), cache=True).run(np.random.default_rng(4))
    b = sim.TrajectoryRunner(c, sim.NoiseModel(0.1), cache=False).run(np.random.default_rng(4))
    assert np.allclose(a, b)


def test_two_qubit_cost_model():
    assert C.two_qubit_cost(C.Gate("X", (0,), (1,))) == 1
    assert C.two_qubit_cost(C.Gate("X", (0,), (1, 2))) == 6
    assert C.mcx_cost(4) == 30


def test_qubit_limit():
    with pytest.raises(ValueError):
        sim.simulate(C.Circuit(sim.MAX_QUBITS + 1))
