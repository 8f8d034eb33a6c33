"""Fluid-particle trajectories of a frozen velocity field and the Bernoulli checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .atlas import AtlasError, OutOfTubeError, SurfaceAtlas
from .fields import ScalarField, TangentField

log = logging.getLogger(__name__)


class TraceAborted(RuntimeError):
    """The trajectory left the tubular neighbourhood; carries the partial trajectory."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class Trajectory:
    s: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    charts: list = field(default_factory=list)

    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.velocities, axis=1)


def _normal(atlas, k, s1, s2):
    d = atlas.charts[k].embed(np.array([s1]), np.array([s2]))
    n = np.cross(d["x1"][0], d["x2"][0]) * atlas.charts[k].orientation
    return n / np.linalg.norm(n)


def interpolate(field_, point, tangent=None):
    """Value of a nodal field at a surface point (or its closest point).

    Tensor Lagrange interpolation of the atlas order in the chart with the
    largest partition-of-unity weight at the point; tangent fields are
    re-projected with the exact normal there.

    Returns
    -------
    value : float or ndarray
    p : ndarray
        The surface point used.
    k : int
        Chart index.
    """
    atlas: SurfaceAtlas = field_.atlas
    k, s1, s2, p = atlas.closest_point(point)
    c = atlas.charts[k]
    idx, w = c.stencil(np.array([s1]), np.array([s2]), atlas.interp_order)
    vals = atlas.chart_view(field_.values, k).reshape((c.size,) + field_.values.shape[1:])
    out = np.tensordot(w[0], vals[idx[0]], axes=(0, 0))
    if tangent is None:
        tangent = isinstance(field_, TangentField)
    if tangent:
        nu = _normal(atlas, k, s1, s2)
        out = out - (out @ nu) * nu
    return out, np.asarray(p, dtype=float), k


def trace(atlas: SurfaceAtlas, u: TangentField, x0, dt: float, T: float) -> Trajectory:
    """Integrate gamma' = u(gamma) with classical RK4 and closest-point reprojection.

    Intermediate stages are evaluated at the closest surface point of the
    stage position (normal-constant extension of u).  The step is adjusted to
    ``T / round(T / dt)`` so the trajectory ends exactly at ``T``.
    """
    if dt <= 0.0 or T < 0.0:
        raise ValueError("dt must be positive and T nonnegative")
    x0 = np.asarray(x0, dtype=float)
    _, _, _, p0 = atlas.closest_point(x0)
    if np.linalg.norm(p0 - x0) > 1e-10:
        log.warning("start point %.3e off the surface; using its closest point",
                    np.linalg.norm(p0 - x0))
    nsteps = max(int(round(T / dt)), 1) if T > 0 else 0
    h = T / nsteps if nsteps else 0.0

    def vel(y):
        v, _, _ = interpolate(u, y, tangent=True)
        return v

    s_list, pts, vels, charts = [0.0], [np.asarray(p0, float)], [], []
    x = np.asarray(p0, dtype=float)
    try:
        v0, _, k0 = interpolate(u, x, tangent=True)
        vels.append(v0)
        charts.append(k0)
        for i in range(nsteps):
            k1 = vels[-1]
            k2 = vel(x + 0.5 * h * k1)
            k3 = vel(x + 0.5 * h * k2)
            k4 = vel(x + h * k3)
            y = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            _, _, _, x = atlas.closest_point(y)
            x = np.asarray(x, dtype=float)
            v, _, k = interpolate(u, x, tangent=True)
            s_list.append((i + 1) * h)
            pts.append(x)
            vels.append(v)
            charts.append(k)
    except (OutOfTubeError, AtlasError) as exc:
        n = len(vels)
        partial = Trajectory(np.array(s_list[:n]), np.array(pts[:n]), np.array(vels), charts)
        raise TraceAborted(f"trajectory aborted at s={s_list[n - 1]:.4g}: {exc}", partial) from exc
    return Trajectory(np.array(s_list), np.array(pts), np.array(vels), charts)


def pressure_along(traj: Trajectory, pi: ScalarField) -> np.ndarray:
    return np.array([float(interpolate(pi, p, tangent=False)[0]) for p in traj.points])


def bernoulli_check(traj: Trajectory, pi: ScalarField):
    """E(s) = 1/2 |gamma'|^2 + pi(gamma(s)) and max |E(s) - E(0)|."""
    E = 0.5 * traj.speed() ** 2 + pressure_along(traj, pi)
    return E, float(np.max(np.abs(E - E[0]))) if E.size else 0.0


def streamline_pressure_check(traj: Trajectory, pi: ScalarField):
    """pi along the trajectory and max |pi(gamma(s)) - pi(gamma(0))|."""
    p = pressure_along(traj, pi)
    return p, float(np.max(np.abs(p - p[0]))) if p.size else 0.0
