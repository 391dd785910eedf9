"""Why the multilevel preconditioner matters.

Compares the spectral condition of the plain stiffness matrix with that of the
preconditioned system C_F^T C_F, and the number of polynomial steps each one
needs to hit a 2^-L tolerance on the QoI.
"""
import numpy as np

from qfem import fem
from qfem import solver as S

print(" L   cond(S)     cond(C_F^T C_F)")
for L in range(3, 9):
    spec = fem.LevelSpec(1, L)
    A = fem.assemble_stiffness(spec)
    P = fem.preconditioned_system(spec)
    ev = np.linalg.eigvalsh(P)
    ev = ev[ev > 1e-10 * ev.max()]
    print(f"{L:2d}  {np.linalg.cond(A):10.1f}  {ev.max() / ev.min():10.3f}")

print("\n L  steps(bpx)  steps(none)")
for L in range(3, 8):
    pr = S.QoIProblem(1, L)
    bpx = S.kappa_eff_search(pr, 2.0 ** -L, preconditioned=True)
    raw = S.kappa_eff_search(pr, 2.0 ** -L, preconditioned=False)
    print(f"{L:2d}  {bpx.steps:10d}  {raw.steps:11d}")
