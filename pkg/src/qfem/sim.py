"""Dense statevector simulation, shot sampling and Pauli-trajectory noise.

The state of ``n`` qubits is kept as an array of shape ``(2,)*n + (batch,)``;
axis ``n-1-q`` belongs to qubit ``q``.  A batch dimension lets one pass push
many input states through a circuit at once (used for matrix extraction).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import Circuit, Gate, one_qubit_cost, permutation_table, two_qubit_cost

MAX_QUBITS = 24

PAULIS = [
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
]


def _apply_targets(arr: np.ndarray, g: Gate, axes: list[int]) -> np.ndarray:
    k = len(axes)
    front = list(reversed(axes))  # most significant target first
    moved = np.moveaxis(arr, front, list(range(k)))
    shape = moved.shape
    flat = moved.reshape(2**k, -1)
    if g.name in ("SWAP", "INC", "SHIFT"):
        new = np.empty_like(flat)
        new[permutation_table(g)] = flat
    else:
        new = g.unitary() @ flat
    return np.moveaxis(new.reshape(shape), list(range(k)), front)


def apply_gate(psi: np.ndarray, g: Gate, n: int) -> np.ndarray:
    if not g.controls:
        return _apply_targets(psi, g, [n - 1 - t for t in g.targets])
    idx = [slice(None)] * psi.ndim
    caxes = set()
    for c, v in zip(g.controls, g.ctrl_state):
        idx[n - 1 - c] = v
        caxes.add(n - 1 - c)
    remaining = [a for a in range(psi.ndim) if a not in caxes]
    axes = [remaining.index(n - 1 - t) for t in g.targets]
    sub = psi[tuple(idx)]
    psi[tuple(idx)] = _apply_targets(sub, g, axes)
    return psi


def _check(n: int):
    if n > MAX_QUBITS:
        raise ValueError(f"{n} qubits exceeds the simulator limit of {MAX_QUBITS}")


def basis_state(n: int, index: int = 0) -> np.ndarray:
    psi = np.zeros(2**n, dtype=complex)
    psi[index] = 1
    return psi


def simulate(circuit: Circuit, state: np.ndarray | None = None) -> np.ndarray:
    """Final statevector; ``state`` may be (2^n,) or (2^n, batch)."""
    n = circuit.n_qubits
    _check(n)
    if state is None:
        state = basis_state(n)
    state = np.asarray(state, dtype=complex)
    single = state.ndim == 1
    psi = state.reshape((2,) * n + (-1,)).copy()
    for g in circuit.gates:
        psi = apply_gate(psi, g, n)
    out = psi.reshape(2**n, -1)
    return out[:, 0] if single else out


def unitary(circuit: Circuit) -> np.ndarray:
    n = circuit.n_qubits
    return simulate(circuit, np.eye(2**n, dtype=complex))


def probabilities(state: np.ndarray) -> np.ndarray:
    p = np.abs(state) ** 2
    return p / p.sum()


def sample_counts(probs: np.ndarray, shots: int, rng: np.random.Generator) -> dict[int, int]:
    counts = rng.multinomial(shots, probs / probs.sum())
    nz = np.nonzero(counts)[0]
    return {int(i): int(counts[i]) for i in nz}


def sample(circuit: Circuit, shots: int, seed: int, state=None) -> dict[int, int]:
    rng = np.random.default_rng(seed)
    return sample_counts(probabilities(simulate(circuit, state)), shots, rng)


def write_counts_csv(path, counts: dict[int, int], n_qubits: int):
    with open(path, "w") as fh:
        fh.write("outcome,count\n")
        for k in sorted(counts):
            fh.write(f"{k:0{n_qubits}b},{counts[k]}\n")


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseModel:
    """Depolarizing noise attached to gates.

    After a gate, each of its ``two_qubit_cost`` CX slots suffers a uniformly
    random non-identity two-qubit Pauli with probability ``eps2`` on a random
    pair of the qubits it touches; each one-qubit slot suffers a random
    non-identity Pauli with probability ``eps1`` (default ``1e-2 * eps2``).
    """

    eps2: float
    eps1: float | None = None

    @property
    def p1(self) -> float:
        return 1e-2 * self.eps2 if self.eps1 is None else self.eps1


class TrajectoryRunner:
    """Runs noisy trajectories of one circuit, reusing noiseless prefixes."""

    def __init__(self, circuit: Circuit, noise: NoiseModel, initial: np.ndarray | None = None,
                 stride: int = 32, cache: bool = True):
        self.c = circuit
        self.n = circuit.n_qubits
        _check(self.n)
        self.noise = noise
        self.n2 = np.array([two_qubit_cost(g) for g in circuit.gates])
        self.n1 = np.array([one_qubit_cost(g) for g in circuit.gates])
        init = basis_state(self.n) if initial is None else np.asarray(initial, dtype=complex)
        psi = init.reshape((2,) * self.n + (1,)).copy()
        # without a cache (single-use runners) every run starts from the initial state
        self.stride = stride if cache else len(circuit.gates) + 1
        self.checkpoints = [psi.copy()]
        self.final = None
        if cache:
            for i, g in enumerate(circuit.gates):
                if i and i % stride == 0:
                    self.checkpoints.append(psi.copy())
                psi = apply_gate(psi, g, self.n)
            self.final = psi.reshape(-1)

    def _pauli(self, psi, q, p):
        if p:
            psi = apply_gate(psi, Gate("U", (q,), matrix=PAULIS[p]), self.n)
        return psi

    def run(self, rng: np.random.Generator) -> np.ndarray:
        e2 = rng.binomial(self.n2, self.noise.eps2) if self.noise.eps2 > 0 else np.zeros_like(self.n2)
        e1 = rng.binomial(self.n1, self.noise.p1) if self.noise.p1 > 0 else np.zeros_like(self.n1)
        hit = np.nonzero((e2 + e1) > 0)[0]
        if len(hit) == 0 and self.final is not None:
            return self.final.copy()
        if len(hit) == 0:
            hit = [0]
        start = (hit[0] // self.stride) * self.stride
        psi = self.checkpoints[start // self.stride].copy()
        for i in range(start, len(self.c.gates)):
            g = self.c.gates[i]
            psi = apply_gate(psi, g, self.n)
            qs = g.qubits
            for _ in range(e2[i]):
                a, b = rng.choice(len(qs), size=2, replace=False)
                pa, pb = divmod(int(rng.integers(1, 16)), 4)
                psi = self._pauli(self._pauli(psi, qs[a], pa), qs[b], pb)
            for _ in range(e1[i]):
                psi = self._pauli(psi, qs[int(rng.integers(len(qs)))], int(rng.integers(1, 4)))
        return psi.reshape(-1)


def simulate_noisy(
    circuit: Circuit,
    noise: NoiseModel,
    shots: int,
    seed: int,
    initial: np.ndarray | None = None,
    trajectories: int | None = None,
) -> dict[int, int]:
    """Sample measurement counts under the trajectory noise model.

    With ``trajectories=None`` every shot gets its own trajectory.  Otherwise a
    pool of that many trajectories is simulated and each shot is drawn from a
    uniformly chosen member of the pool.
    """
    rng = np.random.default_rng(seed)
    runner = TrajectoryRunner(circuit, noise, initial)
    counts: dict[int, int] = {}
    if trajectories is None:
        for _ in range(shots):
            p = probabilities(runner.run(rng))
            k = int(rng.choice(len(p), p=p))
            counts[k] = counts.get(k, 0) + 1
        return dict(sorted(counts.items()))
    per = rng.multinomial(shots, np.full(trajectories, 1.0 / trajectories))
    for m in per:
        p = probabilities(runner.run(rng))
        if m:
            for k, v in sample_counts(p, int(m), rng).items():
                counts[k] = counts.get(k, 0) + v
    return dict(sorted(counts.items()))
