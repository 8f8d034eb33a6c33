import functools
import math

import numpy as np
import pytest

from conftest import ellipsoid, sphere, torus
from surfns.atlas import build_torus
from surfns.calculus import advection, strain, surface_divergence, surface_gradient
from surfns.dynamics import SimConfig
from surfns.fields import (
    AtlasMismatchError,
    ScalarField,
    TangentField,
    inner_l2,
    norm_l2,
)
from surfns.killing import (
    distance_to_E,
    killing_basis,
    killing_coefficients,
    log_linear_fit,
    perturbation_direction,
    principal_angles,
    rayleigh_quotient,
    stability_experiment,
)


def rotations(atlas, axes=np.eye(3)):
    return [TangentField(atlas, np.cross(e, atlas.geometry.x)) for e in axes]


@functools.lru_cache(maxsize=None)
def basis(kind, n):
    atlas = {"sphere": sphere, "torus": torus, "ellipsoid": ellipsoid}[kind](n)
    return killing_basis(atlas)


def test_sphere_dimension_and_span():
    B = basis("sphere", 24)
    assert B.dim == 3 and not B.ambiguous
    assert B.gap_ratio >= 100
    assert principal_angles(B.fields, rotations(B.atlas)).max() <= 1e-3


def test_torus_dimension_and_axis():
    B = basis("torus", 32)
    assert B.dim == 1 and not B.ambiguous
    assert B.gap_ratio >= 100
    k = B.fields[0]
    r = rotations(B.atlas, [[0.0, 0.0, 1.0]])[0]
    c = inner_l2(k, r) / inner_l2(r, r)
    assert norm_l2(k - r * c) / norm_l2(k) <= 1e-3


@pytest.mark.slow
def test_ellipsoid_has_no_killing_fields():
    B = basis("ellipsoid", 24)
    assert B.dim == 0
    # smallest quotient stays bounded away from zero
    assert B.ritz[0] > 1e3 * B.threshold


def test_basis_invariants():
    for kind, n in (("sphere", 24), ("torus", 32)):
        B = basis(kind, n)
        G = np.array([[inner_l2(a, b) for b in B.fields] for a in B.fields])
        assert np.abs(G - np.eye(B.dim)).max() <= 1e-8
        h = B.atlas.h
        for k in B.fields:
            assert rayleigh_quotient(k) < B.threshold
            assert norm_l2(strain(k)) <= 10 * h**3
            assert norm_l2(surface_divergence(k)) <= 1e-8
            # Killing fields: advection(k) = -1/2 grad |k|^2
            half = ScalarField(B.atlas, 0.5 * np.einsum("na,na->n", k.values, k.values))
            assert norm_l2(advection(k) + surface_gradient(half)) <= 10 * h**3
        assert B.dim <= 3


def test_distance_examples():
    B = basis("sphere", 24)
    a = B.atlas
    u = 2.0 * B.fields[0] - 0.5 * B.fields[2]
    d, proj = distance_to_E(u, B)
    assert d <= 1e-8 * norm_l2(u)
    w = perturbation_direction(a, B, seed=3)
    assert abs(norm_l2(w) - 1.0) <= 1e-12
    assert abs(distance_to_E(w, B)[0] - 1.0) <= 1e-8
    eps = 0.05
    d, _ = distance_to_E(B.fields[1] + eps * w, B)
    assert abs(d - eps) <= 1e-6


def test_distance_atlas_mismatch():
    B = basis("torus", 32)
    other = build_torus(2.0, 1.0, 32, 32)
    with pytest.raises(AtlasMismatchError):
        killing_coefficients(TangentField.zeros(other), B)


def test_principal_angles_simple(sphere32):
    r = rotations(sphere32)
    assert principal_angles(r, r[::-1]).max() <= 1e-7
    ang = principal_angles(r[:1], r[1:2])
    assert abs(ang[0] - math.pi / 2) <= 1e-6


def test_log_linear_fit_exact():
    t = np.linspace(0, 3, 40)
    d = 0.3 * np.exp(-2.5 * t)
    rate, r2, decades = log_linear_fit(t, d, 1e-4, 1.0)
    assert abs(rate - 2.5) <= 1e-12 and abs(r2 - 1) <= 1e-12
    assert abs(decades - np.log10(d[d >= 1e-4].max() / d[d >= 1e-4].min())) <= 1e-12
    assert math.isnan(log_linear_fit(t, d, 10.0, 20.0)[0])


def test_stability_rejects_large_eps():
    B = basis("torus", 32)
    k = B.fields[0]
    with pytest.raises(ValueError):
        stability_experiment(B.atlas, k, 0.5, SimConfig(dt=1e-2, t_end=0.1), basis=B)


def test_stability_eps_zero_stays_at_floor():
    B = basis("sphere", 24)
    k = rotations(B.atlas, [[0.0, 0.0, 1.0]])[0]
    rep = stability_experiment(B.atlas, k, 0.0, SimConfig(dt=1e-2, t_end=0.1), basis=B)
    assert np.all(rep.distances <= 1e-6 * rep.reference_norm)
    assert not rep.unstable


def test_stability_short_run_decays():
    B = basis("sphere", 24)
    k = rotations(B.atlas, [[0.0, 0.0, 1.0]])[0]
    rep = stability_experiment(B.atlas, k, 0.01, SimConfig(dt=1e-2, t_end=0.3), basis=B)
    d = rep.distances
    assert not rep.unstable
    assert d[-1] < 0.5 * d[0]
    # after the initial transient the decay is monotone
    assert np.all(np.diff(d[5:]) < 0)
    assert "decay rate" in rep.summary()
    assert rep.terminal_coefficients.shape == (3,)
