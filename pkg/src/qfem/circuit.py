"""Gate-list circuits over named qubit registers.

Qubit ``q`` is bit ``q`` of a basis-state index (little endian).  A register is
a tuple of qubits listed least significant first, and registers are allocated
as contiguous qubit ranges, so basis indices are register-major.

Every gate may carry controls; ``ctrl_state`` gives the required value of each
control (default all ones).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MATRIX_GATES = {"X", "Y", "Z", "H", "RY", "RZ", "U"}
PERMUTATION_GATES = {"SWAP", "INC", "SHIFT"}


def gate_matrix(name: str, param: float | None = None) -> np.ndarray:
    if name == "X":
        return np.array([[0, 1], [1, 0]], dtype=complex)
    if name == "Y":
        return np.array([[0, -1j], [1j, 0]], dtype=complex)
    if name == "Z":
        return np.array([[1, 0], [0, -1]], dtype=complex)
    if name == "H":
        return np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
    if name == "RY":
        c, s = np.cos(param / 2), np.sin(param / 2)
        return np.array([[c, -s], [s, c]], dtype=complex)
    if name == "RZ":
        return np.diag([np.exp(-0.5j * param), np.exp(0.5j * param)])
    raise KeyError(name)


@dataclass(frozen=True, eq=False)
class Gate:
    """One operation.

    For ``U`` the matrix index is ``sum(bit(targets[i]) << i)``.  ``INC`` adds
    ``param`` modulo ``2**len(targets)``; ``SHIFT`` rotates the register bits so
    that the new bit ``i`` is the old bit ``(i + param) % n`` (a right shift).
    """

    name: str
    targets: tuple[int, ...]
    controls: tuple[int, ...] = ()
    ctrl_state: tuple[int, ...] = ()
    param: float | None = None
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if not self.ctrl_state and self.controls:
            object.__setattr__(self, "ctrl_state", (1,) * len(self.controls))
        if len(self.ctrl_state) != len(self.controls):
            raise ValueError("ctrl_state length mismatch")
        qs = self.targets + self.controls
        if len(set(qs)) != len(qs):
            raise ValueError(f"repeated qubit in {self.name} {qs}")

    @property
    def qubits(self) -> tuple[int, ...]:
        return self.targets + self.controls

    def unitary(self) -> np.ndarray:
        """Matrix on the targets (controls excluded)."""
        if self.name == "U":
            return self.matrix
        if self.name in MATRIX_GATES:
            return gate_matrix(self.name, self.param)
        k = len(self.targets)
        perm = permutation_table(self)
        M = np.zeros((2**k, 2**k))
        M[perm, np.arange(2**k)] = 1
        return M

    def inverse(self) -> "Gate":
        if self.name in ("X", "Y", "Z", "H", "SWAP"):
            return self
        if self.name in ("RY", "RZ", "INC", "SHIFT"):
            return replace(self, param=-self.param)
        if self.name == "U":
            return replace(self, matrix=self.matrix.conj().T)
        raise KeyError(self.name)

    def with_control(self, qubit: int, value: int = 1) -> "Gate":
        return replace(self, controls=self.controls + (qubit,), ctrl_state=self.ctrl_state + (value,))

    def remap(self, qmap) -> "Gate":
        return replace(
            self,
            targets=tuple(qmap[q] for q in self.targets),
            controls=tuple(qmap[q] for q in self.controls),
        )

    def label(self) -> str:
        if self.name == "X" and len(self.controls) == 1:
            return "CX"
        if self.name == "X" and len(self.controls) == 2:
            return "CCX"
        if self.name == "X" and len(self.controls) > 2:
            return "MCX"
        if self.name == "U" and self.controls:
            return "MCU"
        return self.name


def permutation_table(g: Gate) -> np.ndarray:
    """perm[v] = image of register value v."""
    k = len(g.targets)
    v = np.arange(2**k)
    if g.name == "SWAP":
        a, b = v & 1, (v >> 1) & 1
        return b | (a << 1)
    if g.name == "INC":
        return (v + int(g.param)) % (2**k)
    if g.name == "SHIFT":
        s = int(g.param) % k
        bits = (v[:, None] >> np.arange(k)) & 1
        new = np.roll(bits, -s, axis=1)
        return (new << np.arange(k)).sum(axis=1)
    raise KeyError(g.name)


@dataclass
class Circuit:
    n_qubits: int
    gates: list[Gate] = field(default_factory=list)
    registers: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def add_register(self, name: str, size: int) -> tuple[int, ...]:
        qs = tuple(range(self.n_qubits, self.n_qubits + size))
        self.n_qubits += size
        self.registers[name] = qs
        return qs

    def append(self, name, targets, controls=(), ctrl_state=(), param=None, matrix=None):
        if isinstance(targets, int):
            targets = (targets,)
        if isinstance(controls, int):
            controls = (controls,)
        g = Gate(name, tuple(targets), tuple(controls), tuple(ctrl_state), param, matrix)
        for q in g.qubits:
            if not 0 <= q < self.n_qubits:
                raise ValueError(f"qubit {q} outside circuit of {self.n_qubits}")
        self.gates.append(g)
        return self

    def extend(self, gates):
        gates = list(gates)
        for g in gates:
            for q in g.qubits:
                if not 0 <= q < self.n_qubits:
                    raise ValueError(f"qubit {q} outside circuit of {self.n_qubits}")
        self.gates.extend(gates)
        return self

    def compose(self, other: "Circuit", qmap=None):
        """Append ``other`` with its qubit q placed on ``qmap[q]``."""
        qmap = list(range(other.n_qubits)) if qmap is None else qmap
        self.extend([g.remap(qmap) for g in other.gates])
        return self

    def inverse(self) -> "Circuit":
        return Circuit(self.n_qubits, [g.inverse() for g in reversed(self.gates)], dict(self.registers))

    def controlled(self, qubit: int, value: int = 1) -> "Circuit":
        return Circuit(self.n_qubits, [g.with_control(qubit, value) for g in self.gates], dict(self.registers))

    def copy(self) -> "Circuit":
        return Circuit(self.n_qubits, list(self.gates), dict(self.registers))

    def __len__(self):
        return len(self.gates)

    def stats(self) -> dict:
        return {
            "qubits": self.n_qubits,
            "gates": len(self.gates),
            "two_qubit": sum(two_qubit_cost(g) for g in self.gates),
        }


# --------------------------------------------------------------- cost model
# Two-qubit gate counts of standard decompositions into {CX, 1q}.  These only
# matter for reporting and for how many noise events a gate attracts.

def mcx_cost(k: int) -> int:
    if k <= 0:
        return 0
    if k == 1:
        return 1
    if k == 2:
        return 6
    return 6 * (2 * k - 3)  # V-chain of Toffolis


def controlled_1q_cost(k: int) -> int:
    return 0 if k == 0 else 2 * mcx_cost(k)


def generic_unitary_cost(n: int) -> int:
    if n <= 1:
        return 0
    if n == 2:
        return 3
    return int(np.ceil((4**n - 3 * n - 1) / 4))


def two_qubit_cost(g: Gate) -> int:
    k = len(g.controls)
    n = len(g.targets)
    if g.name in ("X", "Z"):
        return mcx_cost(k)
    if g.name in ("Y", "H", "RY", "RZ"):
        return controlled_1q_cost(k)
    if g.name == "SWAP":
        return 3 if k == 0 else 2 + mcx_cost(k + 1)
    if g.name == "U":
        if n == 1:
            return controlled_1q_cost(k)
        if k == 0:
            return generic_unitary_cost(n)
        return generic_unitary_cost(n) * mcx_cost(k + 1) + 4 * controlled_1q_cost(k)
    if g.name == "INC":
        return sum(mcx_cost(i + k) for i in range(n))
    if g.name == "SHIFT":
        # a bit rotation by s is n - gcd(n, s) transpositions
        s = int(g.param) % n
        swaps = 0 if s == 0 else n - np.gcd(n, s)
        return swaps * (3 if k == 0 else 2 + mcx_cost(k + 1))
    raise KeyError(g.name)


def one_qubit_cost(g: Gate) -> int:
    return 1 if two_qubit_cost(g) == 0 else two_qubit_cost(g) + 1


# ----------------------------------------------------------------- text dump

def _fmt_complex(z: complex) -> str:
    return f"{float(z.real)!r}:{float(z.imag)!r}"


def dumps(c: Circuit) -> str:
    lines = [f"QUBITS {c.n_qubits}"]
    for name, qs in c.registers.items():
        lines.append(f"REGISTER {name} " + ",".join(map(str, qs)))
    lines.append("BEGIN")
    for g in c.gates:
        parts = [g.label(), "targets=" + ",".join(map(str, g.targets)), "controls=" + ",".join(map(str, g.controls))]
        parts.append("param=" + ("" if g.param is None else repr(float(g.param))))
        if g.controls and any(v == 0 for v in g.ctrl_state):
            parts.append("ctrl_state=" + "".join(map(str, g.ctrl_state)))
        if g.name == "U":
            parts.append("matrix=" + ",".join(_fmt_complex(z) for z in np.asarray(g.matrix).reshape(-1)))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Circuit:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    n = int(lines[0].split()[1])
    c = Circuit(n)
    i = 1
    while lines[i] != "BEGIN":
        _, name, *qs = lines[i].split()
        c.registers[name] = tuple(int(q) for q in qs[0].split(",")) if qs else ()
        i += 1
    for ln in lines[i + 1:]:
        label, *fields = ln.split()
        kv = dict(f.split("=", 1) for f in fields)
        name = {"CX": "X", "CCX": "X", "MCX": "X", "MCU": "U"}.get(label, label)
        targets = tuple(int(q) for q in kv["targets"].split(",") if q)
        controls = tuple(int(q) for q in kv["controls"].split(",") if q)
        ctrl = tuple(int(b) for b in kv["ctrl_state"]) if "ctrl_state" in kv else ()
        param = float(kv["param"]) if kv.get("param") else None
        matrix = None
        if "matrix" in kv:
            vals = [complex(float(a), float(b)) for a, b in (z.split(":") for z in kv["matrix"].split(","))]
            dim = int(round(np.sqrt(len(vals))))
            matrix = np.array(vals).reshape(dim, dim)
        c.append(name, targets, controls, ctrl, param, matrix)
    return c
