"""Oscillating steady-state imaging toolkit.

Bloch simulation of OSSI signals, voxel and phantom models, dictionary
matching, sampling patterns, coil/Fourier encoding, reconstruction
solvers and fMRI analysis, plus the ``ossi-kit`` command-line pipeline.
"""

__version__ = "0.1.0"

from .errors import (ConvergenceError, DimensionMismatchError, InvalidParameterError,
                     SolverDivergenceError)

__all__ = ["__version__", "ConvergenceError", "DimensionMismatchError", "InvalidParameterError",
           "SolverDivergenceError"]
