"""IMEX projection time stepping for the incompressible surface Navier-Stokes equations.

The momentum equation (density 1)

    d_t u + P (u . grad) u - mu Bochner u - mu (kappa L - L^2) u + grad pi = 0,
    div u = 0,

is advanced with implicit viscous diffusion, explicit advection and curvature
terms, and a Helmholtz projection that eliminates the pressure.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .calculus import advection, bochner_laplacian, curvature_op, strain, surface_divergence
from .fields import ScalarField, TangentField, inner_l2, norm_l2
from .helmholtz import helmholtz_project, is_divergence_free
from .linsolve import KrylovConfig, diffusion_solve, poisson_solve

log = logging.getLogger(__name__)

SCHEMES = ("imex1", "imex2")


class SimulationAborted(RuntimeError):
    """A run stopped early; carries the last valid state and the diagnostics so far."""

    def __init__(self, message, state, diagnostics=None):
        super().__init__(message)
        self.state = state
        self.diagnostics = diagnostics if diagnostics is not None else []


@dataclass(frozen=True)
class SimConfig:
    """Physical and numerical parameters of a run.

    Attributes
    ----------
    mu : float
        Surface shear viscosity (density is fixed to 1).
    dt, t_end : float
        Time step and final time.
    cadence : int
        Diagnostics are recorded every ``cadence`` steps (and at the end).
    scheme : {"imex1", "imex2"}
        Backward Euler / forward Euler, or Crank-Nicolson / Adams-Bashforth 2.
    cfl_max : float
        Advective CFL bound dt max|u| / h; exceeding it logs a warning and, with
        ``auto_shrink``, reduces dt for the rest of the run.
    """

    mu: float = 1.0
    dt: float = 1e-3
    t_end: float = 1.0
    cadence: int = 1
    scheme: str = "imex2"
    krylov: KrylovConfig = field(default_factory=KrylovConfig)
    cfl_max: float = 0.5
    auto_shrink: bool = False
    bochner_form: str = "ambient"

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_end < 0.0:
            raise ValueError("t_end must be nonnegative")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class SimState:
    u: TangentField
    t: float = 0.0
    step: int = 0
    dt: float | None = None
    prev_explicit: TangentField | None = None
    psi: ScalarField | None = None

    def copy(self):
        return dataclasses.replace(self)


def energy(state_or_u) -> float:
    """E = 1/2 int |u|^2."""
    u = getattr(state_or_u, "u", state_or_u)
    return 0.5 * inner_l2(u, u)


def dissipation(state_or_u, mu: float) -> float:
    """2 mu int D(u):D(u)."""
    u = getattr(state_or_u, "u", state_or_u)
    D = strain(u)
    return 2.0 * mu * inner_l2(D, D)


def explicit_terms(u: TangentField, mu: float) -> TangentField:
    """-P (u . grad) u + mu (kappa L - L^2) u."""
    return mu * curvature_op(u) - advection(u)


def _cfl(state, dt):
    atlas = state.u.atlas
    speed = np.sqrt(np.einsum("na,na->n", state.u.values, state.u.values))
    return dt * float(speed[atlas.active].max(initial=0.0)) / atlas.h


def step(state: SimState, cfg: SimConfig) -> SimState:
    """Advance one IMEX projection step.

    imex1: (I - dt mu B) u* = u + dt N(u).
    imex2: (I - dt/2 mu B) u* = u + dt/2 mu B u + dt (3/2 N(u) - 1/2 N(u_prev)),
    falling back to imex1 when no previous explicit term is available.
    Then u_new = P_H u*.
    """
    u = state.u
    dt = state.dt or cfg.dt
    prev = state.prev_explicit
    cfl = _cfl(state, dt)
    if cfl > cfg.cfl_max:
        log.warning("step %d: CFL %.3f exceeds %.3f", state.step, cfl, cfg.cfl_max)
        if cfg.auto_shrink:
            dt = dt * cfg.cfl_max / cfl
            prev = None
            log.warning("step %d: dt reduced to %.3e", state.step, dt)

    try:
        N = explicit_terms(u, cfg.mu)
        if cfg.scheme == "imex2" and prev is not None:
            alpha = 0.5 * dt
            rhs = (u + dt * (1.5 * N - 0.5 * prev)
                   + (alpha * cfg.mu) * bochner_laplacian(u, cfg.bochner_form))
        else:
            alpha = dt
            rhs = u + dt * N
        rhs.check_finite("explicit update")
        ustar = diffusion_solve(u.atlas, rhs, alpha, cfg.mu, cfg.krylov, x0=u)
        unew, psi = helmholtz_project(ustar, cfg.krylov, x0=state.psi)
        unew.check_finite("projected velocity")
    except FloatingPointError as exc:
        raise SimulationAborted(f"step {state.step}: {exc}", state) from exc
    return SimState(u=unew, t=state.t + dt, step=state.step + 1, dt=dt,
                    prev_explicit=N, psi=psi)


def diagnostics_row(state: SimState, cfg: SimConfig, basis=None) -> dict:
    from .killing import distance_to_E

    dist = math.nan if basis is None else distance_to_E(state.u, basis)[0]
    return {
        "step": state.step,
        "t": state.t,
        "energy": energy(state),
        "dissipation": dissipation(state, cfg.mu),
        "div_residual": norm_l2(surface_divergence(state.u)),
        "dist_to_E": dist,
        "dt": state.dt or cfg.dt,
    }


def initial_state(u0: TangentField, cfg: SimConfig, div_tol: float = 1e-6) -> SimState:
    """Wrap ``u0``; project it first (with a warning) if it is not divergence-free."""
    ok, res = is_divergence_free(u0, div_tol)
    if not ok:
        log.warning("initial velocity not divergence-free (residual %.3e); projecting", res)
        u0, _ = helmholtz_project(u0, cfg.krylov)
    return SimState(u=u0, dt=cfg.dt)


def run(cfg: SimConfig, u0: TangentField, basis=None, callback=None):
    """Integrate from ``u0`` to ``cfg.t_end``.

    Parameters
    ----------
    basis : KillingBasis, optional
        Enables the distance-to-equilibria column.
    callback : callable, optional
        ``callback(state, row)`` at every diagnostics output (snapshot hook).

    Returns
    -------
    state : SimState
    rows : list of dict
        Diagnostics rows (see ``diagnostics_row``).
    """
    state = initial_state(u0, cfg)
    rows = []

    def record(s):
        row = diagnostics_row(s, cfg, basis)
        rows.append(row)
        if callback is not None:
            callback(s, row)

    record(state)
    while state.t < cfg.t_end - 0.5 * (state.dt or cfg.dt):
        try:
            state = step(state, cfg)
        except SimulationAborted as exc:
            exc.diagnostics = rows
            raise
        if state.step % cfg.cadence == 0:
            record(state)
        if state.step % 100 == 0:
            log.info("t=%.4f step %d energy %.6e", state.t, state.step, rows[-1]["energy"])
    if rows[-1]["step"] != state.step:
        record(state)
    return state, rows


def recover_pressure(state_or_u, mu: float, cfg: KrylovConfig | None = None,
                     bochner_form: str = "ambient") -> ScalarField:
    """Zero-mean pressure from Lap pi = div(-P(u.grad)u + mu Bochner u + mu (kappa L - L^2) u)."""
    u = getattr(state_or_u, "u", state_or_u)
    force = mu * (bochner_laplacian(u, bochner_form) + curvature_op(u)) - advection(u)
    return poisson_solve(u.atlas, surface_divergence(force), cfg)
