"""Numerical laboratory for time-homogeneous Ito SDEs with rough coefficients.

Subpackages by concern:

- :mod:`sdelab.expr` -- closed coefficient expression language (parse,
  differentiate, evaluate)
- :mod:`sdelab.calculus` -- coefficient sets, drift decomposition, generators,
  diffusion square roots, quadrature
- :mod:`sdelab.density` -- invariant-density solves on exhausting boxes
- :mod:`sdelab.criteria` -- sampled-grid sufficient-condition checks
- :mod:`sdelab.montecarlo` -- Euler-Maruyama ensembles and estimators
- :mod:`sdelab.cli` -- scenario runner and report writer
"""

__version__ = "0.1.0"
