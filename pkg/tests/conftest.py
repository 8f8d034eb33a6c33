import functools
import math

import numpy as np
import pytest

from surfns.atlas import build_ellipsoid, build_sphere, build_torus

ELLIPSOID = {"a": 1.3, "b": 1.0, "c": 0.7}


@functools.lru_cache(maxsize=None)
def sphere(n):
    return build_sphere(1.0, n)


@functools.lru_cache(maxsize=None)
def torus(n):
    return build_torus(2.0, 1.0, n, n)


@functools.lru_cache(maxsize=None)
def ellipsoid(n):
    return build_ellipsoid(ELLIPSOID["a"], ELLIPSOID["b"], ELLIPSOID["c"], n)


def atlas_of(kind, n):
    return {"sphere": sphere, "torus": torus, "ellipsoid": ellipsoid}[kind](n)


def oracle_params(kind):
    return {"sphere": {}, "torus": {"R": 2}, "ellipsoid": ELLIPSOID}[kind]


def lsq_order(ns, errs):
    """Least-squares slope of -log(err) against log(n)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(errs, dtype=float))
    return -float(np.polyfit(x, y, 1)[0])


def rel_l2(atlas, diff, ref):
    """Relative L2 error of ambient nodal arrays through the atlas quadrature."""
    w = atlas.linear_quad_weights

    def sq(v):
        v = np.asarray(v).reshape(v.shape[0], -1)
        return float(w @ np.sum(v * v, axis=1))

    return math.sqrt(sq(diff) / sq(ref))


@pytest.fixture(scope="session")
def sphere32():
    return sphere(32)


@pytest.fixture(scope="session")
def torus32():
    return torus(32)


@pytest.fixture(scope="session")
def torus64():
    return torus(64)


@pytest.fixture(scope="session")
def ellipsoid32():
    return ellipsoid(32)


def owned_rel(atlas, diff, ref):
    """Relative L2 error over owned nodes with the owned-node quadrature."""
    own, w = atlas.halo.owned, atlas.owned_quad_weights

    def nrm(v):
        v = np.asarray(v).reshape(np.shape(v)[0], -1)[own]
        return math.sqrt(float(w @ np.sum(v * v, axis=1)))

    return nrm(diff) / nrm(ref)


def oracle(kind, atlas, which=1):
    from oracles import evaluate

    return evaluate(kind, oracle_params(kind), atlas.geometry.x, which)


def operator_errors(kind, n):
    """Owned-node relative error of every calculus operator against the symbolic oracle."""
    from surfns.calculus import (
        advection,
        bochner_laplacian,
        div_symtensor,
        full_gradient,
        laplace_beltrami,
        stokes_rhs,
        strain,
        surface_divergence,
        surface_gradient,
    )
    from surfns.fields import ScalarField, SymTensorField, TangentField

    a = atlas_of(kind, n)
    O = oracle(kind, a)
    phi = ScalarField(a, O["f"])
    u = TangentField(a, O["U"])
    P = O["P"]
    pairs = {
        "surface_gradient": (surface_gradient(phi).values, O["grad"]),
        "laplace_beltrami": (laplace_beltrami(phi).values, O["lap"]),
        "full_gradient": (full_gradient(u).values, O["full_grad"]),
        "divergence_conservative": (surface_divergence(u).values, O["div"]),
        "divergence_extrinsic": (surface_divergence(u, form="extrinsic").values, O["div"]),
        "strain": (strain(u).values, O["strain"]),
        "div_symtensor": (div_symtensor(SymTensorField(a, O["strain"]))[1].values,
                          np.einsum("nab,nb->na", P, O["div_strain"])),
        "bochner_ambient": (bochner_laplacian(u).values, O["bochner"]),
        "bochner_intrinsic": (bochner_laplacian(u, "intrinsic").values, O["bochner"]),
        "stokes_decomposition": (stokes_rhs(u, 1.0).values, O["stokes"]),
        "stokes_direct": (stokes_rhs(u, 1.0, "direct").values, O["stokes"]),
        "advection": (advection(u).values, O["advection"]),
    }
    return {k: owned_rel(a, d - r, r) for k, (d, r) in pairs.items()}


ACCEPTANCE = []


def report(number, title, ok, detail=""):
    """Print and keep one pass/fail line per acceptance criterion."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
