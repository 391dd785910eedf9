"""Multilevel-preconditioned finite elements as block-encoded quantum circuits.

Submodules: ``fem`` (dense/sparse reference matrices), ``circuit`` and ``sim``
(gate lists and statevector simulation), ``encoding`` (block-encoding
calculus), ``preconditioned`` (circuits for the preconditioned gradient),
``stateprep`` (right-hand-side preparation), ``solver`` (polynomial
pseudoinverse and quantity of interest) and ``experiments``/``cli``.
"""

__version__ = "0.1.0"
