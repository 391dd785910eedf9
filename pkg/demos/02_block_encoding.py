"""Build the optimized circuit for C_F and check it against the dense matrix."""
import numpy as np

from qfem import fem
from qfem.encoding import extract_matrix
from qfem.preconditioned import build_U_CF, build_U_CF_optimized

for name, build in (("generic", build_U_CF), ("optimized", build_U_CF_optimized)):
    U = build(1, 3)
    st = U.circuit.stats()
    err = np.abs(extract_matrix(U) - fem.preconditioned_gradient(fem.LevelSpec(1, 3))).max()
    print(f"{name:9s} qubits={U.n_qubits:2d} gates={st['gates']:4d} "
          f"two_qubit={st['two_qubit']:5d} gamma={U.gamma:.4f} error={err:.2e}")
