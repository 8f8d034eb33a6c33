"""Self-consistency suite for the discrete surface calculus.

Each identity is evaluated at a base resolution and one refinement.  Rows of
kind ``order`` pass when the observed convergence order reaches the atlas'
minimum (3.5 on the periodic torus, 3.0 on Yin-Yang atlases) or the error is
already at roundoff; rows of kind ``tol`` pass when the error at both
resolutions is below a fixed tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calculus import (
    StencilPlan,
    bochner_laplacian,
    curvature_op,
    directional_derivative,
    div_symtensor,
    full_gradient,
    stokes_rhs,
    strain,
    surface_divergence,
    surface_gradient,
)
from .dynamics import SimConfig, run
from .fields import ScalarField, SymTensorField, TangentField, inner_l2, norm_l2
from .helmholtz import helmholtz_project

ROUNDOFF = 1e-11


@dataclass
class IdentityRow:
    name: str
    kind: str
    errors: tuple
    order: float
    threshold: float
    passed: bool


def corrupted_plan(scale: float = 1.01) -> StencilPlan:
    """Negative-control stencil: first derivative off by a constant factor."""
    good = StencilPlan.order4()
    return StencilPlan(first=good.first * scale, second=good.second)


def smooth_data(atlas):
    """Fixed smooth scalar phi and tangent fields u, v, w on ``atlas``."""
    x = atlas.geometry.x / np.abs(atlas.geometry.x).max()
    X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
    phi = ScalarField(atlas, np.sin(X + 2 * Y) * np.cos(Z) + np.exp(0.3 * X) * Y)
    u = TangentField(atlas, np.stack([np.sin(Y) + Z * X, np.cos(X * Z) + Y**2,
                                      np.exp(Y / 2) * np.sin(X)], 1))
    v = TangentField(atlas, np.stack([np.cos(2 * Z) * Y, X * np.sin(Y + Z),
                                      np.exp(X / 5) - Y * Z], 1))
    w = TangentField(atlas, np.stack([Y * Z + 1.0, np.sin(X - Z), np.cos(Y) * X], 1))
    return phi, u, v, w


def h2_scale(u: TangentField) -> float:
    """sqrt(||u||^2 + ||grad u||^2 + ||Bochner u||^2)."""
    G = full_gradient(u)
    B = bochner_laplacian(u)
    return math.sqrt(inner_l2(u, u) + inner_l2(G, G) + inner_l2(B, B))


def _rel(diff, ref):
    ref = float(ref)
    return float(diff) / ref if ref > 0 else float(diff)


def _l2_ambient(atlas, vals):
    """L2 norm of an ambient (N, ...) array through the stored-node quadrature."""
    sq = np.sum(vals.reshape(vals.shape[0], -1) ** 2, axis=1)
    return math.sqrt(max(float(atlas.linear_quad_weights @ sq), 0.0))


def _owned_rel(atlas, diff, ref):
    """Relative max-norm error over owned nodes (non-owned nodes are interpolants)."""
    own = atlas.halo.owned
    d = np.abs(diff[own]).max()
    return _rel(d, np.abs(ref[own]).max())


def measure(atlas, energy_steps: int = 5) -> dict:
    """Residual of every identity on one atlas (dict name -> relative error)."""
    geo = atlas.geometry
    phi, u, v, w = smooth_data(atlas)
    out = {}

    # tensor divergence: div(phi P) = grad phi + phi kappa nu
    T = SymTensorField(atlas, phi.values[:, None, None] * geo.projector, exchange=False)
    lhs = div_symtensor(T)[0].values
    rhs = surface_gradient(phi).values + (phi.values * geo.mean_curvature)[:, None] * geo.normal
    out["div(phi P) = grad phi + phi kappa nu"] = _rel(_l2_ambient(atlas, lhs - rhs), _l2_ambient(atlas, rhs))

    # directional derivative: (u . grad) v = (grad v)^T u
    Gv = full_gradient(v).values
    a = directional_derivative(u, v).values
    b = np.einsum("nab,nb->na", geo.projector, np.einsum("nab,na->nb", Gv, u.values))
    out["directional derivative (u.grad)v"] = _owned_rel(atlas, a - b, b)

    # product rule: grad (u|v) = (grad u) v + (grad v) u
    Gu = full_gradient(u).values
    uv = ScalarField(atlas, np.einsum("na,na->n", u.values, v.values))
    a = surface_gradient(uv).values
    b = np.einsum("nab,nb->na", Gu, v.values) + np.einsum("nab,nb->na", Gv, u.values)
    out["product rule grad(u|v)"] = _rel(_l2_ambient(atlas, a - b), _l2_ambient(atlas, b))

    # product rule: (u | grad (v|w)) = ((u.grad) v | w) + ((u.grad) w | v)
    vw = ScalarField(atlas, np.einsum("na,na->n", v.values, w.values))
    a = np.einsum("na,na->n", u.values, surface_gradient(vw).values)
    b = (np.einsum("na,na->n", directional_derivative(u, v).values, w.values)
         + np.einsum("na,na->n", directional_derivative(u, w).values, v.values))
    out["product rule (u|grad(v|w))"] = _rel(_l2_ambient(atlas, a - b), _l2_ambient(atlas, b))

    # divergence theorem: (grad phi | u) + (phi | div u) = 0
    g = surface_gradient(phi)
    dv = surface_divergence(u)
    out["divergence theorem"] = _rel(abs(inner_l2(g, u) + inner_l2(phi, dv)),
                                     norm_l2(g) * norm_l2(u))

    # integration by parts for the strain: (P div D(u) | v) + int D(u):D(v) = 0
    Du, Dv = strain(u), strain(v)
    pdivD = div_symtensor(Du)[1]
    out["strain integration by parts"] = _rel(abs(inner_l2(pdivD, v) + inner_l2(Du, Dv)),
                                              norm_l2(Du) * norm_l2(Dv))

    # trace identity tr D(u) = div u (extrinsic divergence, same stencils)
    tr = np.trace(Du.values, axis1=1, axis2=2)
    de = surface_divergence(u, form="extrinsic").values
    out["trace tr D = div u"] = _owned_rel(atlas, tr - de, de)

    # Stokes operator, two independent forms: 2 P div D(u) = Bochner u + grad div u + (kappa L - L^2) u
    direct = stokes_rhs(u, 1.0, "direct")
    decomp = stokes_rhs(u, 1.0, "decomposition")
    out["Stokes operator mutual oracle"] = _rel(norm_l2(direct - decomp), h2_scale(u))

    # curvature term: (kappa L - L^2) u = K u nodewise
    Ku = geo.gauss_curvature[:, None] * u.values
    out["curvature term kappa L - L^2 = K"] = _owned_rel(atlas, curvature_op(u).values - Ku, u.values)

    # Helmholtz projection
    pu, _ = helmholtz_project(u)
    ppu, _ = helmholtz_project(pu)
    out["helmholtz idempotence"] = _rel(norm_l2(ppu - pu), norm_l2(u))
    pg, _ = helmholtz_project(g)
    out["helmholtz gradient annihilation"] = _rel(norm_l2(pg), norm_l2(g))
    pv, _ = helmholtz_project(v)
    out["helmholtz self-adjointness"] = _rel(abs(inner_l2(pu, v) - inner_l2(u, pv)),
                                             norm_l2(u) * norm_l2(v))

    # discrete energy law over a few imex2 steps
    dt = 2.5e-4 * atlas.area() / (4 * math.pi)
    cfg = SimConfig(mu=1.0, dt=dt, t_end=energy_steps * dt, scheme="imex2")
    _, rows = run(cfg, pu)
    E = np.array([r["energy"] for r in rows])
    Dd = np.array([r["dissipation"] for r in rows])
    t = np.array([r["t"] for r in rows])
    rate = np.diff(E) / np.diff(t)
    mid = 0.5 * (Dd[1:] + Dd[:-1])
    defect = float(np.max(np.abs(rate + mid) / mid))
    out["energy law"] = defect if np.all(np.diff(E) < 0) else math.inf
    return out


EXACT_TOL = {
    "directional derivative (u.grad)v": 1e-12,
    "trace tr D = div u": 1e-12,
    "curvature term kappa L - L^2 = K": 1e-10,
    "helmholtz idempotence": 1e-8,
    "helmholtz gradient annihilation": 1e-8,
    "energy law": 0.05,
}


def identity_suite(build, n: int, n_refined: int | None = None, stencil_plan=None):
    """Run every identity at ``n`` and ``n_refined`` (default 1.5 n, even).

    Parameters
    ----------
    build : callable
        ``build(n) -> SurfaceAtlas``.
    stencil_plan : StencilPlan, optional
        Replacement difference stencils (negative-control hook).

    Returns
    -------
    list of IdentityRow
    """
    if n_refined is None:
        n_refined = 2 * int(round(0.75 * n))
    results = []
    periodic = None
    for m in (n, n_refined):
        atlas = build(m)
        if stencil_plan is not None:
            atlas.stencil_plan = stencil_plan
        periodic = len(atlas.charts) == 1
        results.append(measure(atlas))
    min_order = 3.5 if periodic else 3.0
    exact = dict(EXACT_TOL)
    if periodic:
        exact["helmholtz self-adjointness"] = 1e-8
    rows = []
    for name in results[0]:
        e0, e1 = results[0][name], results[1][name]
        if e0 > 0 and e1 > 0 and math.isfinite(e0) and math.isfinite(e1):
            order = math.log(e0 / e1) / math.log(n_refined / n)
        else:
            order = math.nan
        if name in exact:
            thr = exact[name]
            ok = e0 <= thr and e1 <= thr
            rows.append(IdentityRow(name, "tol", (e0, e1), order, thr, ok))
        else:
            ok = (math.isfinite(order) and order >= min_order) or e1 <= ROUNDOFF
            rows.append(IdentityRow(name, "order", (e0, e1), order, min_order, bool(ok)))
    return rows


def format_table(rows, n, n_refined) -> str:
    head = f"{'identity':36s} {'kind':5s} {'err@' + str(n):>11s} {'err@' + str(n_refined):>11s} {'order':>6s} {'thresh':>8s}  result"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.name:36s} {r.kind:5s} {r.errors[0]:11.3e} {r.errors[1]:11.3e} "
            f"{r.order:6.2f} {r.threshold:8.1e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
