"""One test per acceptance criterion; each prints a single pass/fail line."""

import math
import time

import numpy as np
import pytest

from conftest import ellipsoid, lsq_order, operator_errors, report, sphere, torus
from surfns.atlas import integrate_scalar
from surfns.calculus import div_symtensor, stokes_rhs, strain, surface_divergence, surface_gradient
from surfns.cli import main
from surfns.dynamics import SimConfig, recover_pressure, run
from surfns.fields import ScalarField, TangentField, inner_l2, norm_l2, random_smooth_tangent
from surfns.helmholtz import helmholtz_project
from surfns.killing import killing_basis, principal_angles, stability_experiment
from surfns.tracer import bernoulli_check, streamline_pressure_check, trace
from surfns.verify import h2_scale

E3 = np.array([0.0, 0.0, 1.0])


def rotation(atlas, axis=E3):
    return TangentField(atlas, np.cross(axis, atlas.geometry.x))


def test_criterion_01_geometry_identities():
    worst, gb = {}, {}
    for name, a, K_total in (("sphere", sphere(64), 4 * math.pi), ("torus", torus(64), 0.0),
                             ("ellipsoid", ellipsoid(64), 4 * math.pi)):
        res = a.geometry.identity_residuals(a.active)
        worst[name] = max(res[k] for k in ("dual_basis", "metric_inverse", "weingarten",
                                           "gauss_equation"))
        gb[name] = abs(integrate_scalar(a, a.geometry.gauss_curvature) - K_total)
    ok = max(worst.values()) <= 1e-10 and max(gb.values()) <= 1e-6
    detail = ", ".join(f"{k} identities {worst[k]:.1e} GB {gb[k]:.1e}" for k in worst)
    assert report(1, "geometry identities and Gauss-Bonnet", ok, detail)


def test_criterion_02_operator_convergence():
    ns = (32, 48, 64, 96)
    lines, ok = [], True
    for kind, need in (("torus", 3.5), ("sphere", 3.0)):
        errs = [operator_errors(kind, n) for n in ns]
        orders = {k: lsq_order(ns, [r[k] for r in errs]) for k in errs[0]}
        worst = min(orders, key=orders.get)
        ok &= orders[worst] >= need
        lines.append(f"{kind} min order {orders[worst]:.2f} ({worst}, need {need})")
    assert report(2, "operator convergence", ok, "; ".join(lines))


ROUNDOFF = 1e-13


def converges(errs, ns, need):
    """Observed order at least ``need``, or every error already at roundoff."""
    if max(errs) <= ROUNDOFF:
        return True, math.inf
    order = lsq_order(ns, errs)
    return order >= need, order


def test_criterion_03_stokes_mutual_oracle():
    ns = (32, 48, 64)
    lines, ok = [], True
    for kind, build in (("sphere", sphere), ("torus", torus), ("ellipsoid", ellipsoid)):
        for seed in (0, 1, 2):
            errs = []
            for n in ns:
                a = build(n)
                u = random_smooth_tangent(a, np.random.default_rng(seed))
                diff = stokes_rhs(u, 1.0, "direct") - stokes_rhs(u, 1.0, "decomposition")
                errs.append(norm_l2(diff) / h2_scale(u))
            good, order = converges(errs, ns, 3.0)
            ok &= errs[-1] <= 1e-4 and good
            lines.append(f"{kind}/{seed} {errs[-1]:.1e} order {order:.2f}")
    assert report(3, "Stokes operator mutual oracle", ok, ", ".join(lines))


def test_criterion_04_divergence_theorem_and_parts():
    ns = (48, 64, 96)
    lines, ok = [], True
    for kind, build in (("sphere", sphere), ("torus", torus), ("ellipsoid", ellipsoid)):
        res = {"div": [], "parts": []}
        for n in ns:
            a = build(n)
            x = a.geometry.x / np.abs(a.geometry.x).max()
            phi = ScalarField(a, np.sin(x[:, 0] + 2 * x[:, 1]) * np.cos(x[:, 2]))
            u = random_smooth_tangent(a, np.random.default_rng(1))
            v = random_smooth_tangent(a, np.random.default_rng(2))
            g = surface_gradient(phi)
            res["div"].append(abs(inner_l2(g, u) + inner_l2(phi, surface_divergence(u)))
                              / (norm_l2(g) * norm_l2(u)))
            Du, Dv = strain(u), strain(v)
            res["parts"].append(abs(inner_l2(div_symtensor(Du)[1], v) + inner_l2(Du, Dv))
                                / (norm_l2(Du) * norm_l2(Dv)))
        for k, e in res.items():
            at64 = e[1]
            good, order = converges(e, ns, 3.0)
            ok &= at64 <= 1e-5 and good
            lines.append(f"{kind} {k} {at64:.1e} order {order:.2f}")
    assert report(4, "divergence theorem and integration by parts", ok, ", ".join(lines))


def test_criterion_05_helmholtz_projection():
    a = torus(64)
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        v, w = random_smooth_tangent(a, rng), random_smooth_tangent(a, rng)
        x = a.geometry.x / 3.0
        g = surface_gradient(ScalarField(a, np.sin(x[:, 0] + 2 * x[:, 1]) * np.cos(x[:, 2])))
        pv, psi = helmholtz_project(v)
        pw, _ = helmholtz_project(w)
        ppv, _ = helmholtz_project(pv)
        pg, _ = helmholtz_project(g)
        nv, nw = norm_l2(v), norm_l2(w)
        res = [
            norm_l2(ppv - pv) / nv,
            abs(inner_l2(pv, w) - inner_l2(v, pw)) / (nv * nw),
            norm_l2(pg) / norm_l2(g),
            abs(nv**2 - norm_l2(pv) ** 2 - norm_l2(surface_gradient(psi)) ** 2) / nv**2,
        ]
        worst = max(worst, *res)
    assert report(5, "Helmholtz projection (torus 64)", worst <= 1e-8,
                  f"max residual over idempotence, self-adjointness, annihilation, "
                  f"Pythagoras {worst:.1e}")


@pytest.mark.slow
def test_criterion_06_killing_dimensions():
    t0 = time.time()
    lines, ok = [], True
    for kind, a, dim in (("sphere", sphere(32), 3), ("torus", torus(64), 1)):
        B = killing_basis(a)
        good = B.dim == dim and B.gap_ratio >= 100 and not B.ambiguous
        if kind == "sphere":
            ang = principal_angles(B.fields, [rotation(a, e) for e in np.eye(3)]).max()
            good &= ang <= 1e-3
            lines.append(f"sphere dim {B.dim} gap {B.gap_ratio:.1e} angle {ang:.1e}")
        else:
            lines.append(f"torus dim {B.dim} gap {B.gap_ratio:.1e}")
        ok &= good
    # ellipsoid: no quotient falls below the threshold, and the smallest one is
    # resolution independent (refinement oracle for a true nonzero minimum)
    smallest = []
    for n in (32, 48):
        B = killing_basis(ellipsoid(n))
        ok &= B.dim == 0 and B.gap_ratio >= 100
        smallest.append(B.ritz[0])
    ok &= abs(smallest[1] - smallest[0]) <= 0.01 * smallest[1]
    lines.append(f"ellipsoid dim 0, smallest quotient {smallest[0]:.4f} / {smallest[1]:.4f}")
    elapsed = time.time() - t0
    ok &= elapsed <= 600
    assert report(6, "Killing dimensions", ok, ", ".join(lines) + f", {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_07_equilibrium_stationarity():
    a = sphere(32)
    u0 = rotation(a)
    state, rows = run(SimConfig(mu=1.0, dt=1e-3, t_end=1.0, scheme="imex2", cadence=10), u0)
    err = norm_l2(state.u - u0) / norm_l2(u0)
    E = np.array([r["energy"] for r in rows])
    drift = np.abs(E - E[0]).max() / E[0]
    ok = abs(state.t - 1.0) < 1e-9 and err <= 1e-3 and drift <= 1e-3
    assert report(7, "equilibrium stationarity (sphere 32)", ok,
                  f"|u(T)-u0|/|u0| {err:.1e}, energy drift {drift:.1e}")


def _defects(rows, dt):
    E = np.array([r["energy"] for r in rows])
    D = np.array([r["dissipation"] for r in rows])
    mid = 0.5 * (D[1:] + D[:-1])
    return E, np.abs(np.diff(E) / dt + mid) / mid


@pytest.mark.slow
def test_criterion_08_energy_law():
    a = torus(64)
    u0 = helmholtz_project(random_smooth_tangent(a, np.random.default_rng(0)))[0]
    dt = 5e-4
    _, rows = run(SimConfig(dt=dt, t_end=0.5), u0)
    E, d = _defects(rows, dt)
    ok = len(rows) == 1001 and np.all(np.diff(E) < 0) and d.max() <= 0.05
    lines = [f"monotone {bool(np.all(np.diff(E) < 0))}, max balance defect {d.max():.1e}"]
    # halving dt over a common window [0, 0.01]
    for scheme in ("imex1", "imex2"):
        worst = []
        for h in (dt, dt / 2):
            _, r = run(SimConfig(dt=h, t_end=0.01, scheme=scheme), u0)
            worst.append(_defects(r, h)[1].max())
        ratio = worst[0] / worst[1]
        ok &= ratio >= 2.0
        lines.append(f"{scheme} defect ratio {ratio:.2f}")
    assert report(8, "energy law (torus 64)", ok, ", ".join(lines))


@pytest.mark.slow
def test_criterion_09_stability():
    lines, ok = [], True
    for kind, a, dt, T in (("sphere", sphere(24), 1e-2, 8.0), ("torus", torus(32), 1e-2, 30.0)):
        B = killing_basis(a)
        k = rotation(a)
        rep = stability_experiment(a, k, 0.01, SimConfig(dt=dt, t_end=T), basis=B,
                                   stop_below=1e-7)
        u0 = norm_l2(k) * math.sqrt(1 + 0.01**2)
        decades = math.log10(rep.distances.max() / rep.distances[-1])
        terminal = rep.terminal_distance / u0
        shift = np.abs(rep.terminal_coefficients - rep.initial_coefficients).max() / norm_l2(k)
        good = (not rep.unstable and rep.r_squared >= 0.99 and decades >= 4
                and terminal <= 1e-6)
        ok &= good
        lines.append(f"{kind} rate {rep.rate:.3f} R^2 {rep.r_squared:.5f} "
                     f"decay {decades:.1f} decades terminal {terminal:.1e} "
                     f"coefficient shift {shift:.1e}")
    assert report(9, "stability of equilibria", ok, "; ".join(lines))


def _pressure_std(u):
    a = u.atlas
    pi = recover_pressure(u, 1.0)
    d = pi.values - 0.5 * np.einsum("na,na->n", u.values, u.values)
    own, w = a.halo.owned, a.owned_quad_weights
    m = float(w @ d[own]) / w.sum()
    std = math.sqrt(float(w @ (d[own] - m) ** 2) / w.sum())
    return std / np.abs(u.values[own]).max() ** 2


def test_criterion_10_equilibrium_pressure():
    s = _pressure_std(rotation(sphere(64), np.array([0.4, 0.0, 1.0])))
    t = _pressure_std(rotation(torus(64)))
    assert report(10, "equilibrium pressure is Bernoulli", max(s, t) <= 1e-4,
                  f"sphere std {s:.1e}, torus std {t:.1e}")


def test_criterion_11_streamlines_and_bernoulli():
    lines, ok = [], True
    a = sphere(48)
    u = rotation(a)
    tr = trace(a, u, [1.0, 0.0, 0.0], 2 * math.pi / 400, 2 * math.pi)
    closure = float(np.linalg.norm(tr.points[-1] - [1.0, 0.0, 0.0]))
    ok &= closure <= 1e-6
    lines.append(f"sphere closure {closure:.1e}")
    cases = (("sphere", a, u, [0.0, 0.8, 0.6]),
             ("torus", torus(64), rotation(torus(64)), [2.0 * math.cos(0.3), 2.0 * math.sin(0.3), 1.0]))
    for kind, atlas, vel, x0 in cases:
        pi = recover_pressure(vel, 1.0)
        tr = trace(atlas, vel, x0, 2 * math.pi / 200, 2 * math.pi)
        E, dev_E = bernoulli_check(tr, pi)
        _, dev_p = streamline_pressure_check(tr, pi)
        rel_E = dev_E / abs(E[0])
        rel_p = dev_p / np.abs(pi.values).max()
        ok &= rel_E <= 1e-5 and rel_p <= 1e-5
        lines.append(f"{kind} Bernoulli {rel_E:.1e} streamline {rel_p:.1e}")
    assert report(11, "streamlines and Bernoulli", ok, ", ".join(lines))


def test_criterion_12_reproducibility(tmp_path):
    sets = ["surface.kind=torus", "surface.n=32", "experiment.initial=perturbed-killing",
            "experiment.seed=1234", "experiment.track_killing=true", "physics.dt=5e-3",
            "physics.t_end=0.1", "output.cadence=1", "output.snapshots=false"]
    outs = []
    for name in ("a", "b"):
        argv = ["simulate", "--output", str(tmp_path / name)]
        for s in sets:
            argv += ["--set", s]
        assert main(argv) == 0
        outs.append((tmp_path / name / "diagnostics.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    assert report(12, "bit-identical diagnostics", ok, f"{len(outs[0])} bytes compared")
