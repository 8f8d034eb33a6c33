"""Surface Navier-Stokes on closed surfaces: atlas, calculus, projection, dynamics and equilibria."""

__version__ = "0.1.0"
