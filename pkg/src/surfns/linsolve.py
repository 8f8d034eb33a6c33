"""Matrix-free Krylov solvers for the Laplace-Beltrami and implicit diffusion problems.

Unknowns are the values on owned nodes; every operator application expands
them to all chart nodes by halo exchange, applies the stencil operator and
restricts back.  No matrix is assembled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .atlas import SurfaceAtlas
from .calculus import bochner_laplacian, laplace_beltrami
from .fields import ScalarField, TangentField

log = logging.getLogger(__name__)


class IterativeFailure(RuntimeError):
    """A Krylov solve did not reach its tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class KrylovConfig:
    tol: float = 1e-10
    maxiter: int = 5000
    restart: int = 50

    def __post_init__(self):
        if not (0.0 < self.tol <= 1e-2):
            raise ValueError(f"Krylov tolerance must lie in (0, 1e-2], got {self.tol}")
        if self.maxiter < 1 or self.restart < 1:
            raise ValueError("maxiter and restart must be >= 1")


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    removed_mean: float = 0.0
    removed_null: float = 0.0


def _owned(atlas, field):
    return field.values[atlas.halo.owned]


def _scalar_from_owned(atlas, x):
    return ScalarField(atlas, atlas.expand(x), exchange=False)


def _checkerboard_modes(atlas):
    """Grid-scale modes annihilated by the wide first-difference stencil (periodic chart)."""
    c = atlas.charts[0]
    i = np.arange(c.shape[0])[:, None]
    j = np.arange(c.shape[1])[None, :]
    modes = [(-1.0) ** i + 0 * j, (-1.0) ** j + 0 * i, (-1.0) ** (i + j)]
    return [m.ravel().astype(float) for m in modes]


def _run_krylov(method, A, b, cfg, label, M=None, x0=None, atol=0.0):
    count = [0]

    def cb(_):
        count[0] += 1

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    if method == "cg":
        x, info = spla.cg(A, b, x0=x0, rtol=cfg.tol, atol=atol, maxiter=cfg.maxiter,
                          callback=cb, M=M)
    else:
        x, info = spla.gmres(A, b, x0=x0, rtol=cfg.tol, atol=atol, restart=cfg.restart,
                             maxiter=cfg.maxiter, callback=cb, callback_type="pr_norm", M=M)
    res = np.linalg.norm(b - A @ x) / bnorm
    log.debug("%s: %s finished in %d iterations, residual %.3e", label, method, count[0], res)
    if info != 0 and res > 10 * max(cfg.tol, atol / bnorm):
        raise IterativeFailure(f"{label} did not converge", res, count[0])
    return x, count[0], res


def _approx_expand(atlas):
    """Sparse approximation of the owned-to-all expansion (chained halo terms dropped)."""
    h = atlas.halo
    N, n_own = atlas.n_nodes, h.owned.size
    top = sp.csr_matrix((np.ones(n_own), (h.owned, np.arange(n_own))), shape=(N, n_own))
    Io = h.from_owned.tocoo()
    low = sp.csr_matrix((Io.data, (h.nonowned[Io.row], Io.col)), shape=(N, n_own))
    return (top + low).tocsr()


def compact_laplacian_matrix(atlas, wide: bool = False) -> sp.csr_matrix:
    """Second-order Laplace-Beltrami on owned rows, all-node columns.

    g^ij d_ij f - g^ij Lambda^k_ij d_k f with centred second-order differences;
    ``wide`` builds the pure second derivatives as D1 o D1 (offsets +-2).
    Used only to build preconditioners; the solvers apply the fourth-order
    operators matrix-free.
    """
    geo = atlas.geometry
    gi = geo.metric_inv
    gl = np.einsum("nij,nkij->nk", gi, geo.christoffel)
    rows, cols, vals = [], [], []
    owned_mask = atlas.owned
    for k, c in enumerate(atlas.charts):
        n1, n2 = c.shape
        off = atlas.offsets[k]
        I, J = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        I, J = I.ravel(), J.ravel()
        node = off + I * n2 + J
        sel = owned_mask[node]
        I, J, node = I[sel], J[sel], node[sel]
        h1, h2 = c.h1, c.h2
        a11, a12, a22 = gi[node, 0, 0], gi[node, 0, 1], gi[node, 1, 1]
        b1, b2 = gl[node, 0], gl[node, 1]
        if wide:
            # second-order D1 o D1: same aliasing structure as the fourth-order composite
            terms = [
                (0, 0, -a11 / (2 * h1**2) - a22 / (2 * h2**2)),
                (2, 0, a11 / (4 * h1**2)),
                (-2, 0, a11 / (4 * h1**2)),
                (0, 2, a22 / (4 * h2**2)),
                (0, -2, a22 / (4 * h2**2)),
                (1, 0, -b1 / (2 * h1)),
                (-1, 0, b1 / (2 * h1)),
                (0, 1, -b2 / (2 * h2)),
                (0, -1, b2 / (2 * h2)),
            ]
        else:
            terms = [
                (0, 0, -2 * a11 / h1**2 - 2 * a22 / h2**2),
                (1, 0, a11 / h1**2 - b1 / (2 * h1)),
                (-1, 0, a11 / h1**2 + b1 / (2 * h1)),
                (0, 1, a22 / h2**2 - b2 / (2 * h2)),
                (0, -1, a22 / h2**2 + b2 / (2 * h2)),
            ]
        terms += [
            (1, 1, a12 / (2 * h1 * h2)),
            (-1, -1, a12 / (2 * h1 * h2)),
            (1, -1, -a12 / (2 * h1 * h2)),
            (-1, 1, -a12 / (2 * h1 * h2)),
        ]
        for d1, d2, v in terms:
            ii, jj = I + d1, J + d2
            if c.periodic[0]:
                ii = np.mod(ii, n1)
            if c.periodic[1]:
                jj = np.mod(jj, n2)
            rows.append(node)
            cols.append(off + ii * n2 + jj)
            vals.append(v)
    rows = np.concatenate(rows)
    pos = -np.ones(atlas.n_nodes, dtype=int)
    pos[atlas.halo.owned] = np.arange(atlas.halo.owned.size)
    return sp.csr_matrix(
        (np.concatenate(vals), (pos[rows], np.concatenate(cols))),
        shape=(atlas.halo.owned.size, atlas.n_nodes),
    )


_PRECOND_CACHE: dict = {}
PRECOND_THRESHOLD = 0.5


def _factor_cached(atlas, key, build):
    cache = _PRECOND_CACHE.setdefault(id(atlas), {"atlas": atlas})
    if cache["atlas"] is not atlas:
        cache.clear()
        cache["atlas"] = atlas
    if key not in cache:
        cache[key] = build()
    return cache[key]


def lb_preconditioner(atlas, shift: float = 1e-2):
    """LU of (-compact Laplacian + shift I) in owned unknowns, as a LinearOperator."""

    def build():
        M = compact_laplacian_matrix(atlas, wide=True) @ _approx_expand(atlas)
        A = (-M + shift * sp.identity(M.shape[0])).tocsc()
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))

    lu = _factor_cached(atlas, ("lb", shift), build)
    n = atlas.halo.owned.size
    return spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)


def vector_preconditioner(atlas, alpha_mu: float):
    """LU of (I - alpha_mu * compact Laplacian) per ambient component on the tangent part.

    The normal component passes through unchanged, matching the identity block
    of the diffusion system.
    """

    def build():
        M = compact_laplacian_matrix(atlas) @ _approx_expand(atlas)
        A = (sp.identity(M.shape[0]) - alpha_mu * M).tocsc()
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))

    lu = _factor_cached(atlas, ("vec", alpha_mu), build)
    n = atlas.halo.owned.size
    nu = atlas.geometry.normal[atlas.halo.owned]

    def apply(x):
        x = x.reshape(n, 3)
        xn = np.einsum("na,na->n", nu, x)[:, None] * nu
        y = lu.solve(np.ascontiguousarray(x - xn))
        y -= np.einsum("na,na->n", nu, y)[:, None] * nu
        return (y + xn).ravel()

    return spla.LinearOperator((3 * n, 3 * n), matvec=apply, dtype=float)


def poisson_solve(atlas: SurfaceAtlas, rhs: ScalarField, cfg: KrylovConfig | None = None,
                  return_info: bool = False, x0: ScalarField | None = None):
    """Zero-mean solution of laplace_beltrami(phi) = P0 rhs.

    The singular operator is pinned by solving (-Lap + 1 w^T/|S|) x = -P0 rhs,
    with w the owned-node quadrature weights, so the constant null space is
    removed inside every operator application.  On the periodic torus the
    system is quadrature-symmetric and solved by CG in the weighted inner
    product; the three checkerboard modes of the wide stencil (also in the
    null space there) are removed from the right-hand side.  On multi-chart
    atlases restarted GMRES is used.  When the discrete rhs is not exactly in
    the range of the operator (multi-chart atlases, O(h^4) mismatch), the
    solution satisfies Lap phi = P0 rhs - c for a constant c, which is reported
    in ``info.removed_null``.  ``x0`` is an optional initial guess.
    """
    cfg = cfg or KrylovConfig()
    rhs.check_finite("poisson_solve rhs")
    w = atlas.owned_quad_weights
    area = w.sum()
    b = _owned(atlas, rhs)
    mean = float(w @ b) / area
    b = b - mean
    removed_null = 0.0
    periodic = len(atlas.charts) == 1 and all(atlas.charts[0].periodic)
    if periodic:
        for m in _checkerboard_modes(atlas):
            coef = float(w @ (m * b)) / float(w @ (m * m))
            removed_null = max(removed_null, abs(coef))
            b = b - coef * m

    def op(x):
        lap = laplace_beltrami(_scalar_from_owned(atlas, x)).values[atlas.halo.owned]
        return -lap + (w @ x) / area

    n = b.size
    start = None if x0 is None else _owned(atlas, x0)
    if periodic:
        sw = np.sqrt(w)
        A = spla.LinearOperator((n, n), matvec=lambda y: sw * op(y / sw), dtype=float)
        y, it, res = _run_krylov("cg", A, -sw * b, cfg, "poisson",
                                 x0=None if start is None else sw * start)
        x = y / sw
    else:
        A = spla.LinearOperator((n, n), matvec=op, dtype=float)
        x, it, res = _run_krylov("gmres", A, -b, cfg, "poisson", M=lb_preconditioner(atlas),
                                 x0=start)
        removed_null = abs(float(w @ x) / area)
    x = x - (w @ x) / area
    phi = _scalar_from_owned(atlas, x)
    info = SolveInfo(iterations=it, residual=res, removed_mean=mean, removed_null=removed_null)
    log.info("poisson_solve: %d iterations, residual %.2e, removed mean %.2e",
             it, res, mean)
    return (phi, info) if return_info else phi


def diffusion_operator(u: TangentField, alpha_mu: float, bochner_form: str = "ambient"):
    """(I - alpha mu Bochner) u."""
    if alpha_mu == 0.0:
        return u.copy()
    return u - alpha_mu * bochner_laplacian(u, bochner_form)


def diffusion_solve(atlas: SurfaceAtlas, rhs: TangentField, alpha: float, mu: float,
                    cfg: KrylovConfig | None = None, x0: TangentField | None = None,
                    shift: float = 0.0, return_info: bool = False):
    """Solve (I - alpha mu Bochner - shift K) u = rhs for a tangent field u.

    Unknowns are ambient 3-vectors on owned nodes; the normal component maps
    to itself so the system is nonsingular and the solution stays tangential.
    ``shift`` adds a multiple of the Gauss-curvature term (used by the Killing
    preconditioner); it is zero for the time stepper.
    """
    cfg = cfg or KrylovConfig()
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    rhs.check_finite("diffusion_solve rhs")
    if alpha * mu == 0.0 and shift == 0.0:
        out = rhs.copy()
        return (out, SolveInfo(0, 0.0)) if return_info else out
    own = atlas.halo.owned
    nu = atlas.geometry.normal[own]
    K = atlas.geometry.gauss_curvature
    am = alpha * mu

    def op(xflat):
        x = xflat.reshape(-1, 3)
        u = TangentField(atlas, atlas.expand(x))
        v = diffusion_operator(u, am).values
        if shift:
            v = v - shift * K[:, None] * u.values
        normal = np.einsum("na,na->n", nu, x)[:, None] * nu
        return (v[own] + normal).ravel()

    n = own.size * 3
    A = spla.LinearOperator((n, n), matvec=op, dtype=float)
    b = rhs.values[own].ravel()
    count = [0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        out = TangentField.zeros(atlas)
        return (out, SolveInfo(0, 0.0)) if return_info else out
    start = None if x0 is None else x0.values[own].ravel()
    # the stencil-scale stiffness am/h^2 decides whether a preconditioner pays off
    M = vector_preconditioner(atlas, am) if am / atlas.h**2 > PRECOND_THRESHOLD else None
    x, info = spla.gmres(A, b, x0=start, rtol=cfg.tol, atol=0.0, restart=cfg.restart,
                         maxiter=cfg.maxiter, callback=lambda _: count.__setitem__(0, count[0] + 1),
                         callback_type="pr_norm", M=M)
    res = np.linalg.norm(b - A @ x) / bnorm
    if info != 0 and res > cfg.tol * 10:
        raise IterativeFailure("diffusion solve did not converge", res, count[0])
    log.debug("diffusion_solve: %d iterations, residual %.2e", count[0], res)
    out = TangentField(atlas, atlas.expand(x.reshape(-1, 3)))
    return (out, SolveInfo(count[0], res)) if return_info else out
