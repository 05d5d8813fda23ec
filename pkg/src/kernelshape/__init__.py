"""Shape optimisation of a two-phase transmission problem with RKHS gradients.

Modules
-------
mesh            body-fitted triangulations, deformation, quality checks, snapshots
fem             P1 state/adjoint solves and the tracking cost
shape_calculus  tensor form of the shape derivative and its diagnostics
kernels         radial kernels and the RKHS representation of the gradient
gradients       descent fields in RKHS, H1 and Euclidean metrics
optimizer       fixed-metric and variable-metric descent loops
cli             command line front end
"""

__version__ = "0.1.0"
