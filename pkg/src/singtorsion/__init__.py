"""Spectral geometry of deformed polynomial singularities.

Subpackages cover the exact polynomial layer (polycore), the exterior-algebra
fiber (fiber), oscillator-basis spectral computations (spectral), heat traces
and zeta-regularized torsion (heatzeta), the off-diagonal heat-kernel
expansion (parametrix), tt* geometry data (ttstar), and the command line
front end (cli).
"""

__version__ = "0.1.0"
