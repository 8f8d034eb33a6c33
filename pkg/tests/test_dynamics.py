import logging
import math

import numpy as np
import pytest
import sympy as sp

from conftest import owned_rel, sphere, torus
from oracles import X, SurfaceOracle, jet, scalar_data, vector_data
from surfns.calculus import surface_divergence
from surfns.dynamics import (
    SimConfig,
    SimState,
    SimulationAborted,
    dissipation,
    energy,
    initial_state,
    recover_pressure,
    run,
    step,
)
from surfns.fields import ScalarField, TangentField, inner_l2, norm_l2, random_smooth_tangent
from surfns.helmholtz import helmholtz_project, is_divergence_free
from surfns.linsolve import poisson_solve

E3 = np.array([0.0, 0.0, 1.0])


def rotation(atlas, axis=E3):
    return TangentField(atlas, np.cross(axis, atlas.geometry.x))


def divfree(atlas, seed=0):
    return helmholtz_project(random_smooth_tangent(atlas, np.random.default_rng(seed)))[0]


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(mu=0.0)
    with pytest.raises(ValueError):
        SimConfig(dt=-1.0)
    with pytest.raises(ValueError):
        SimConfig(scheme="rk4")
    with pytest.raises(ValueError):
        SimConfig(cadence=0)
    assert SimConfig(dt=1e-3, t_end=1.0).n_steps == 1000


def test_energy_examples():
    a = sphere(64)
    assert energy(TangentField.zeros(a)) == 0.0
    u = rotation(a)
    assert abs(energy(u) - 4 * math.pi / 3) <= 1e-6
    assert energy(u) == inner_l2(u, u) / 2


def test_dissipation_examples():
    a = sphere(32)
    assert dissipation(TangentField.zeros(a), 1.0) == 0.0
    h = a.h
    assert dissipation(rotation(a, np.array([1.0, -2.0, 0.5])), 1.0) <= 10 * h**6


def test_dissipation_gradient_field_matches_symbolic_strain():
    # u = grad_S f for the oracle scalar f; exact strain from the ambient gradient jet
    f = scalar_data()
    grad_jet = jet([sp.diff(f, v) for v in X])
    S = SurfaceOracle("sphere")
    errs = []
    for n in (32, 64):
        a = sphere(n)
        pts = a.geometry.x
        U, dU, ddU = grad_jet(pts)
        ops = S.vector_ops(S.geometry(pts), U, dU, ddU)
        D = ops["strain"]
        w = a.linear_quad_weights
        exact = 2.0 * float(w @ np.einsum("nab,nab->n", D, D))
        u = TangentField(a, U)
        errs.append(abs(dissipation(u, 1.0) - exact) / exact)
    assert errs[1] <= 1e-5
    assert math.log2(errs[0] / errs[1]) >= 3.0


def test_zero_initial_data_stays_zero(torus32):
    cfg = SimConfig(dt=1e-2, t_end=0.05)
    state, rows = run(cfg, TangentField.zeros(torus32))
    assert np.all(state.u.values == 0.0)
    assert all(r["energy"] == 0.0 and r["dissipation"] == 0.0 for r in rows)


def test_killing_rotation_short_run_is_stationary():
    a = sphere(24)
    u0 = rotation(a)
    cfg = SimConfig(dt=1e-3, t_end=0.02, cadence=5)
    state, rows = run(cfg, u0)
    assert norm_l2(state.u - u0) / norm_l2(u0) <= 1e-5
    E = [r["energy"] for r in rows]
    assert max(E) - min(E) <= 1e-6 * E[0]
    assert abs(inner_l2(state.u, u0) - inner_l2(u0, u0)) <= 1e-4 * inner_l2(u0, u0)


def test_random_divfree_energy_decreases_and_invariants(torus32):
    u0 = divfree(torus32, 3)
    cfg = SimConfig(dt=2e-3, t_end=0.04)
    state, rows = run(cfg, u0)
    E = np.array([r["energy"] for r in rows])
    assert np.all(np.diff(E) < 0)
    assert np.abs(state.u.normal_component()).max() <= 1e-11
    assert all(r["div_residual"] <= 1e-8 * math.sqrt(2 * r["energy"] + 1) for r in rows)
    assert len(rows) == cfg.n_steps + 1


def test_imex2_self_convergence_second_order(torus32):
    u0 = divfree(torus32, 5)
    T = 0.04
    finals = []
    for dt in (4e-3, 2e-3, 1e-3):
        s, _ = run(SimConfig(dt=dt, t_end=T), u0)
        finals.append(s.u)
    e1 = norm_l2(finals[0] - finals[1])
    e2 = norm_l2(finals[1] - finals[2])
    assert e1 / e2 >= 3.0


def test_imex1_first_order(torus32):
    u0 = divfree(torus32, 5)
    finals = []
    for dt in (4e-3, 2e-3, 1e-3):
        s, _ = run(SimConfig(dt=dt, t_end=0.04, scheme="imex1"), u0)
        finals.append(s.u)
    ratio = norm_l2(finals[0] - finals[1]) / norm_l2(finals[1] - finals[2])
    assert 1.6 <= ratio <= 2.6


def test_initial_state_projects_with_warning(torus32, caplog):
    v = random_smooth_tangent(torus32, np.random.default_rng(1))
    with caplog.at_level(logging.WARNING, logger="surfns.dynamics"):
        s = initial_state(v, SimConfig())
    assert "projecting" in caplog.text
    assert is_divergence_free(s.u)[0]


def test_cfl_warning_and_shrink(torus32, caplog):
    u = divfree(torus32, 2)
    u = u * (50.0 / u.max_abs())
    cfg = SimConfig(dt=1e-2, t_end=1e-2, auto_shrink=True)
    with caplog.at_level(logging.WARNING, logger="surfns.dynamics"):
        s = step(SimState(u=u, dt=cfg.dt), cfg)
    assert "CFL" in caplog.text
    assert s.dt < cfg.dt
    assert s.dt * 50.0 / torus32.h <= cfg.cfl_max * (1 + 1e-12)


def test_non_finite_state_aborts(torus32):
    v = divfree(torus32).values.copy()
    v[3] = np.nan
    bad = TangentField(torus32, v, exchange=False)
    with pytest.raises(SimulationAborted) as err:
        step(SimState(u=bad, dt=1e-3), SimConfig())
    assert err.value.state.u is bad


def test_pressure_of_zero_field(sphere32):
    pi = recover_pressure(TangentField.zeros(sphere32), 1.0)
    assert np.all(pi.values == 0.0)


def test_pressure_of_killing_field_is_bernoulli():
    res = []
    for n in (32, 48):
        a = sphere(n)
        u = rotation(a, np.array([0.4, 0.0, 1.0]))
        pi = recover_pressure(u, 1.0)
        d = pi.values - 0.5 * np.einsum("na,na->n", u.values, u.values)
        own = a.halo.owned
        w = a.owned_quad_weights
        m = float(w @ d[own]) / w.sum()
        std = math.sqrt(float(w @ (d[own] - m) ** 2) / w.sum())
        res.append(std / np.abs(u.values).max() ** 2)
    assert res[1] <= 1e-5


def test_pressure_manufactured_force():
    # recovered pressure vs Poisson solve with the symbolically evaluated force
    S = SurfaceOracle("torus", R=2)
    vj = jet(vector_data())
    errs = []
    for n in (32, 64):
        a = torus(n)
        pts = a.geometry.x
        U, dU, ddU = vj(pts)
        G = S.geometry(pts)
        ops = S.vector_ops(G, U, dU, ddU)
        u = TangentField(a, U)
        K = a.geometry.gauss_curvature[:, None]
        force = ops["bochner"] + K * ops["u"] - ops["advection"]
        ref = poisson_solve(a, surface_divergence(TangentField(a, force)))
        pi = recover_pressure(u, 1.0)
        errs.append(owned_rel(a, pi.values - ref.values, ref.values))
    assert errs[1] <= 1e-3
    assert math.log2(errs[0] / errs[1]) >= 3.0
