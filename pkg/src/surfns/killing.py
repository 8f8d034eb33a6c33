"""Discrete Killing fields (the equilibria of surface Navier-Stokes) and stability runs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .atlas import SurfaceAtlas
from .calculus import strain
from .dynamics import SimConfig, SimState, diagnostics_row, initial_state, step
from .fields import AtlasMismatchError, TangentField, inner_l2, norm_l2, random_smooth_tangent
from .helmholtz import helmholtz_project
from .linsolve import KrylovConfig, diffusion_solve

log = logging.getLogger(__name__)


class EigenStagnation(RuntimeError):
    """The subspace iteration did not settle within the iteration budget."""


@dataclass
class KillingBasis:
    """L2-orthonormal basis of the discrete Killing fields.

    Attributes
    ----------
    fields : list of TangentField
    quotients : ndarray
        Rayleigh quotients int|D(k)|^2 / ||k||^2 of the accepted fields.
    ritz : ndarray
        All Rayleigh-Ritz values of the probe block, ascending.
    threshold, gap_ratio : float
        Detection threshold and ratio between the first rejected and last
        accepted quotient (first quotient over threshold when none is accepted).
    ambiguous : bool
        Set when threshold and gap rules disagree.
    """

    atlas: SurfaceAtlas
    fields: list
    quotients: np.ndarray
    ritz: np.ndarray
    threshold: float
    gap_ratio: float
    ambiguous: bool
    iterations: int = 0
    ritz_fields: list = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return len(self.fields)


def _gram(xs, ys, inner):
    return np.array([[inner(x, y) for y in ys] for x in xs])


def _strain_inner(a, b):
    return inner_l2(a, b)


def rayleigh_quotient(u: TangentField) -> float:
    D = strain(u)
    return inner_l2(D, D) / inner_l2(u, u)


def _classify(ritz, probe_max, h):
    thr = max(1e-6 * probe_max, 10.0 * h**6)
    m = int(np.sum(ritz < thr))
    if m == 0:
        gap = ritz[0] / thr
    elif m == ritz.size:
        gap = math.inf
    else:
        gap = ritz[m] / max(ritz[m - 1], np.finfo(float).tiny)
    ambiguous = m > 0 and gap < 100.0
    return m, thr, gap, ambiguous


def killing_basis(atlas: SurfaceAtlas, n_probe: int = 6, cfg: KrylovConfig | None = None,
                  seed: int = 42, alpha: float | None = None, max_iter: int = 60,
                  rtol: float = 1e-4) -> KillingBasis:
    """Near-null space of Q(u) = int |D(u)|^2 on divergence-free tangent fields.

    Block inverse iteration with the shifted viscous operator
    ``(I + alpha (-Bochner - K))^{-1}`` followed by the Helmholtz projection,
    i.e. an approximate resolvent of the Stokes operator, with Rayleigh-Ritz
    on the Gram matrices of Q and the L2 product after every sweep.

    Parameters
    ----------
    n_probe : int
        Block size (at least 6).
    alpha : float, optional
        Resolvent scale; defaults to area / pi (4 on the unit sphere).
    rtol : float
        Stop when each of the lowest ``n_probe - 2`` Ritz values changes by
        less than ``rtol`` relative (plus a small absolute term tied to the
        threshold).  The remaining two act as guard vectors.
    """
    cfg = cfg or KrylovConfig(tol=1e-10)
    p = max(int(n_probe), 6)
    rng = np.random.default_rng(seed)
    alpha = atlas.area() / math.pi if alpha is None else float(alpha)
    X = [helmholtz_project(random_smooth_tangent(atlas, rng), cfg)[0] for _ in range(p)]
    probe_max = max(rayleigh_quotient(x) for x in X)
    h = atlas.h
    thr = max(1e-6 * probe_max, 10.0 * h**6)

    ritz_old = None
    for it in range(1, max_iter + 1):
        Y = []
        for x in X:
            y = diffusion_solve(atlas, x, alpha, 1.0, cfg, x0=x, shift=alpha)
            Y.append(helmholtz_project(y, cfg)[0])
        Ds = [strain(y) for y in Y]
        Q = _gram(Ds, Ds, _strain_inner)
        M = _gram(Y, Y, inner_l2)
        Q = 0.5 * (Q + Q.T)
        M = 0.5 * (M + M.T)
        ritz, C = scipy.linalg.eigh(Q, M)
        X = [TangentField(atlas, sum(C[j, i] * Y[j].values for j in range(p)), exchange=False)
             for i in range(p)]
        log.debug("killing iteration %d: ritz %s", it, np.array2string(ritz, precision=3))
        lead = ritz[:p - 2]  # the top two vectors act as guards and may drift
        if ritz_old is not None and np.all(
                np.abs(lead - ritz_old[:p - 2]) <= rtol * np.abs(lead) + 1e-3 * thr):
            break
        ritz_old = ritz
    else:
        raise EigenStagnation(f"Ritz values still moving after {max_iter} iterations")

    m, thr, gap, ambiguous = _classify(ritz, probe_max, h)
    if ambiguous:
        log.warning("Killing detection ambiguous: %d quotients below %.2e, gap ratio %.2f",
                    m, thr, gap)
    log.info("Killing basis: dim %d, gap ratio %.3g, iterations %d", m, gap, it)
    fields_ = []
    for x in X:
        fields_.append(x / math.sqrt(inner_l2(x, x)))
    return KillingBasis(atlas=atlas, fields=fields_[:m],
                        quotients=np.array([rayleigh_quotient(k) for k in fields_[:m]]),
                        ritz=ritz, threshold=thr, gap_ratio=gap, ambiguous=ambiguous,
                        iterations=it, ritz_fields=fields_)


def killing_coefficients(u: TangentField, basis: KillingBasis) -> np.ndarray:
    if u.atlas is not basis.atlas:
        raise AtlasMismatchError("field and Killing basis live on different atlases")
    return np.array([inner_l2(k, u) for k in basis.fields])


def distance_to_E(u: TangentField, basis: KillingBasis):
    """L2 distance to span(basis) and the orthogonal projection onto it."""
    coef = killing_coefficients(u, basis)
    proj = TangentField.zeros(u.atlas)
    for c, k in zip(coef, basis.fields):
        proj = proj + c * k
    return norm_l2(u - proj), proj


def principal_angles(fields_a, fields_b) -> np.ndarray:
    """Principal angles (radians, ascending) between two spans in the L2 product."""

    def orthonormal(fs):
        G = _gram(fs, fs, inner_l2)
        w, V = np.linalg.eigh(G)
        keep = w > 1e-14 * w.max()
        return V[:, keep] / np.sqrt(w[keep])

    Ca, Cb = orthonormal(fields_a), orthonormal(fields_b)
    cross = Ca.T @ _gram(fields_a, fields_b, inner_l2) @ Cb
    s = np.clip(np.linalg.svd(cross, compute_uv=False), -1.0, 1.0)
    # sin of the angle from 1 - s^2 keeps accuracy for tiny angles
    return np.sort(np.arcsin(np.sqrt(np.clip(1.0 - s**2, 0.0, None))))


def perturbation_direction(atlas: SurfaceAtlas, basis: KillingBasis, seed: int = 42,
                           cfg: KrylovConfig | None = None) -> TangentField:
    """Normalized divergence-free random field orthogonal to the Killing fields."""
    rng = np.random.default_rng(seed)
    w, _ = helmholtz_project(random_smooth_tangent(atlas, rng), cfg)
    _, proj = distance_to_E(w, basis)
    w = w - proj
    return w / norm_l2(w)


@dataclass
class StabilityReport:
    times: np.ndarray
    distances: np.ndarray
    energies: np.ndarray
    dissipations: np.ndarray
    rate: float
    r_squared: float
    fit_decades: float
    initial_coefficients: np.ndarray
    terminal_coefficients: np.ndarray
    terminal_distance: float
    reference_norm: float
    unstable: bool
    rows: list = field(default_factory=list, repr=False)

    def summary(self) -> str:
        coef_i = " ".join(f"{c:.8e}" for c in self.initial_coefficients)
        coef_t = " ".join(f"{c:.8e}" for c in self.terminal_coefficients)
        return "\n".join([
            f"decay rate lambda_fit = {self.rate:.6e}",
            f"fit R^2 = {self.r_squared:.6f}",
            f"fit window decades = {self.fit_decades:.2f}",
            f"terminal distance / ||k|| = {self.terminal_distance / self.reference_norm:.3e}",
            f"initial Killing coefficients = {coef_i}",
            f"terminal Killing coefficients = {coef_t}",
            f"unstable = {self.unstable}",
        ])


def log_linear_fit(t, d, lo, hi):
    """Least-squares fit of log d = c - rate t over samples with lo <= d <= hi.

    Returns (rate, R^2, decades spanned by the samples used).
    """
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    sel = (d >= lo) & (d <= hi)
    if sel.sum() < 3:
        return math.nan, math.nan, 0.0
    ts, ys = t[sel], np.log(d[sel])
    A = np.stack([np.ones_like(ts), ts], axis=1)
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = ys - A @ coef
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else math.nan
    return -float(coef[1]), r2, float(np.log10(d[sel].max() / d[sel].min()))


def stability_experiment(atlas: SurfaceAtlas, k: TangentField, eps: float, cfg: SimConfig,
                         basis: KillingBasis | None = None, w: TangentField | None = None,
                         seed: int = 42, window=(1e-6, 1e-2), stop_below: float = 2e-7,
                         callback=None) -> StabilityReport:
    """Evolve u0 = k + eps ||k|| w and record the distance to the Killing fields.

    ``eps`` is relative to ||k||.  The run ends at ``cfg.t_end`` or once the
    distance drops below ``stop_below * ||k||``; it is flagged unstable (and
    stopped) if the distance exceeds ten times its initial value.
    """
    if not 0.0 <= eps <= 0.1:
        raise ValueError(f"perturbation amplitude must lie in [0, 0.1], got {eps}")
    basis = basis or killing_basis(atlas, cfg=cfg.krylov, seed=seed)
    knorm = norm_l2(k)
    if w is None:
        w = perturbation_direction(atlas, basis, seed, cfg.krylov)
    u0 = k + (eps * knorm) * w
    state: SimState = initial_state(u0, cfg)
    rows = [diagnostics_row(state, cfg, basis)]
    initial = killing_coefficients(state.u, basis)
    d0 = rows[0]["dist_to_E"]
    unstable = False
    while state.t < cfg.t_end - 0.5 * state.dt:
        state = step(state, cfg)
        row = diagnostics_row(state, cfg, basis)
        rows.append(row)
        if callback is not None:
            callback(state, row)
        if d0 > 0 and row["dist_to_E"] > 10.0 * d0:
            unstable = True
            log.error("distance to equilibria grew tenfold at t=%.4f", state.t)
            break
        if row["dist_to_E"] < stop_below * knorm:
            break
    t = np.array([r["t"] for r in rows])
    d = np.array([r["dist_to_E"] for r in rows])
    rate, r2, decades = log_linear_fit(t, d, window[0] * knorm, window[1] * knorm)
    return StabilityReport(
        times=t, distances=d,
        energies=np.array([r["energy"] for r in rows]),
        dissipations=np.array([r["dissipation"] for r in rows]),
        rate=rate, r_squared=r2, fit_decades=decades,
        initial_coefficients=initial,
        terminal_coefficients=killing_coefficients(state.u, basis),
        terminal_distance=float(d[-1]), reference_norm=knorm, unstable=unstable, rows=rows,
    )
