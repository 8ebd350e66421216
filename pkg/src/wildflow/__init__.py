"""Convex-integration constructions for stochastic Navier-Stokes on the 3-torus.

Modules
-------
field3      spectral algebra, calculus operators and norms on T^3
jets        intermittent jets and the geometric decomposition lemma
engine      one convex-integration step, inductive bounds, equation residuals
stochastic  noise sampling, stochastic convolution, stopping times, Galerkin solver
roughpath   Ito lift, controlled paths, semigroup sewing, RPDE solver
cli         experiment orchestration
"""

__version__ = "0.1.0"
