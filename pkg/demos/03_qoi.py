"""Estimate the mean of the solution of -u'' = 1 (exact value 1/12).

Emulation uses the dense matrices; "exact" runs the full circuit on the
statevector simulator; "sampled" draws finite shots from it.
"""
from qfem import solver as S

pr = S.QoIProblem(1, 3)
for mode in ("emulation", "exact", "sampled"):
    res = S.qoi_pipeline(pr, mode, tol=2.0 ** -3, shots=20_000, seed=1)
    print(f"{mode:9s} estimate={res.estimate:.6f} reference={res.reference:.6f} "
          f"rel_error={res.rel_error:.2e}")
print("continuum value 1/12 =", 1 / 12)
