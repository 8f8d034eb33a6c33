"""Discrete surface Helmholtz (Leray) projection onto divergence-free tangent fields."""

from __future__ import annotations

import numpy as np

from .calculus import full_gradient, surface_divergence, surface_gradient
from .fields import ScalarField, TangentField, inner_l2, norm_l2
from .linsolve import KrylovConfig, poisson_solve


def helmholtz_project(v: TangentField, cfg: KrylovConfig | None = None,
                      x0: ScalarField | None = None, return_info: bool = False):
    """Split ``v = u + grad psi`` with ``div u = 0``.

    ``psi`` solves the discrete Poisson problem built from the same gradient
    and divergence stencils that are applied here, so the projector is
    idempotent up to the Krylov tolerance.

    Parameters
    ----------
    v : TangentField
    cfg : KrylovConfig, optional
    x0 : ScalarField, optional
        Initial guess for the potential (e.g. the previous time step's).
    return_info : bool
        Also return the Poisson ``SolveInfo``.

    Returns
    -------
    u : TangentField
        Divergence-free part.
    psi : ScalarField
        Zero-mean potential.
    """
    v.check_finite("helmholtz_project input")
    div = surface_divergence(v)
    psi, info = poisson_solve(v.atlas, div, cfg, return_info=True, x0=x0)
    u = v - surface_gradient(psi)
    return (u, psi, info) if return_info else (u, psi)


def h1_scale(u: TangentField) -> float:
    """sqrt(||u||^2 + ||grad u||^2), the reference size for divergence residuals."""
    G = full_gradient(u)
    return float(np.sqrt(inner_l2(u, u) + inner_l2(G, G)))


def is_divergence_free(u: TangentField, tol: float = 1e-6):
    """Return ``(ok, residual)`` with residual = ||div u||_L2 and ok iff residual <= tol * H1 scale."""
    res = norm_l2(surface_divergence(u))
    return bool(res <= tol * h1_scale(u)), res
