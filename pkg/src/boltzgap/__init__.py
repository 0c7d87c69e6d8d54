"""boltzgap: a discrete-velocity laboratory for spectral gap formation in
cutoff Boltzmann dynamics with soft potentials on bounded domains."""

__version__ = "0.1.0"

from .velocity import VelocityGrid, MomentCoefficients, build_grid, integrate, project_P

__all__ = [
    "VelocityGrid",
    "MomentCoefficients",
    "build_grid",
    "integrate",
    "project_P",
    "__version__",
]
