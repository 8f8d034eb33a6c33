"""Scalar, tangent and symmetric-tensor fields over an atlas, with the L2 structure."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .atlas import SurfaceAtlas


class AtlasMismatchError(ValueError):
    """Two fields live on different atlases."""


class NonFiniteFieldError(FloatingPointError):
    """A field contains NaN or infinite values."""


class Field:
    """Values at every chart node (flat over the atlas).

    Non-owned nodes always hold the halo interpolant of owned values, so the
    owned values determine the field.
    """

    value_shape: tuple = ()
    _tangent = False

    def __init__(self, atlas: SurfaceAtlas, values, exchange: bool = True):
        vals = np.asarray(values, dtype=float)
        expected = (atlas.n_nodes,) + self.value_shape
        if vals.shape != expected:
            raise ValueError(f"{type(self).__name__} needs shape {expected}, got {vals.shape}")
        if self._tangent:
            vals = self._project(atlas, vals)
        if exchange:
            vals = atlas.halo_exchange(vals, tangent=self._tangent)
        self.atlas = atlas
        self.values = vals

    @staticmethod
    def _project(atlas, vals):
        return vals

    # -- construction -------------------------------------------------------

    @classmethod
    def zeros(cls, atlas):
        return cls(atlas, np.zeros((atlas.n_nodes,) + cls.value_shape), exchange=False)

    @classmethod
    def from_function(cls, atlas, f: Callable):
        """Evaluate ``f`` on the (N, 3) array of node positions."""
        return cls(atlas, f(atlas.geometry.x))

    def copy(self):
        out = object.__new__(type(self))
        out.atlas = self.atlas
        out.values = self.values.copy()
        return out

    def _like(self, values):
        out = object.__new__(type(self))
        out.atlas = self.atlas
        out.values = values
        return out

    # -- algebra ------------------------------------------------------------

    def _check(self, other):
        if not isinstance(other, Field):
            raise TypeError(f"expected a field, got {type(other).__name__}")
        if other.atlas is not self.atlas:
            raise AtlasMismatchError("fields live on different atlases")
        if other.value_shape != self.value_shape:
            raise TypeError("field kinds differ")

    def __add__(self, other):
        self._check(other)
        return self._like(self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return self._like(self.values - other.values)

    def __mul__(self, c):
        if isinstance(c, Field):
            return NotImplemented
        return self._like(self.values * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self._like(self.values / float(c))

    def __neg__(self):
        return self._like(-self.values)

    def owned_values(self):
        return self.values[self.atlas.halo.owned]

    def check_finite(self, label: str = "field"):
        bad = ~np.isfinite(self.values)
        if bad.any():
            nodes = np.flatnonzero(bad.reshape(bad.shape[0], -1).any(axis=1))
            raise NonFiniteFieldError(
                f"{label}: {nodes.size} nodes with non-finite values (first node {nodes[0]})"
            )
        return self

    def max_abs(self) -> float:
        return float(np.abs(self.values[self.atlas.active]).max(initial=0.0))


class ScalarField(Field):
    value_shape = ()


class TangentField(Field):
    """Tangent vector field stored in ambient components, re-projected on construction."""

    value_shape = (3,)
    _tangent = True

    @staticmethod
    def _project(atlas, vals):
        return np.einsum("nab,nb->na", atlas.geometry.projector, vals)

    def normal_component(self) -> np.ndarray:
        return np.einsum("na,na->n", self.values, self.atlas.geometry.normal)

    def chart_components(self) -> np.ndarray:
        """Contravariant components u^i = (u|tau^i), shape (N, 2)."""
        return np.einsum("nia,na->ni", self.atlas.geometry.tau_dual, self.values)


class SymTensorField(Field):
    """Symmetric tangential 2-tensor (T nu = 0) as an ambient 3x3 matrix."""

    value_shape = (3, 3)
    _tangent = True

    @staticmethod
    def _project(atlas, vals):
        P = atlas.geometry.projector
        vals = 0.5 * (vals + np.swapaxes(vals, 1, 2))
        return P @ vals @ P

    def trace(self) -> ScalarField:
        return ScalarField(self.atlas, np.trace(self.values, axis1=1, axis2=2), exchange=False)


def pointwise_dot(a: Field, b: Field) -> np.ndarray:
    a._check(b)
    va = a.values.reshape(a.values.shape[0], -1)
    vb = b.values.reshape(b.values.shape[0], -1)
    return np.einsum("nk,nk->n", va, vb)


def inner_l2(a: Field, b: Field) -> float:
    """PoU quadrature of the pointwise inner product (Frobenius for tensors)."""
    atlas = a.atlas
    total = float(np.dot(atlas.quad_weights, pointwise_dot(a, b)))
    if atlas.ring_weights.size:
        ra = atlas.ring_values(a.values, a._tangent).reshape(atlas.ring_weights.size, -1)
        rb = atlas.ring_values(b.values, b._tangent).reshape(atlas.ring_weights.size, -1)
        total += float(np.dot(atlas.ring_weights, np.einsum("nk,nk->n", ra, rb)))
    return total


def norm_l2(a: Field) -> float:
    return float(np.sqrt(max(inner_l2(a, a), 0.0)))


def axpy(alpha: float, x: Field, y: Field) -> Field:
    """alpha * x + y."""
    y._check(x)
    return y._like(alpha * x.values + y.values)


def scale(x: Field, alpha: float) -> Field:
    return x * alpha


def project_tangent(atlas: SurfaceAtlas, v) -> TangentField:
    """P_Sigma v nodewise for an ambient (N, 3) array or field."""
    vals = getattr(v, "values", v)
    return TangentField(atlas, vals)


def integrate(f: ScalarField) -> float:
    return f.atlas.integrate(f.values)


def mean_value(f: ScalarField) -> float:
    return f.atlas.integrate(f.values) / f.atlas.area()


def remove_mean(f: ScalarField) -> ScalarField:
    return f._like(f.values - mean_value(f))


def random_smooth_tangent(atlas: SurfaceAtlas, rng: np.random.Generator, degree: int = 3) -> TangentField:
    """Tangential projection of a random ambient polynomial field.

    Coordinates are scaled by the atlas extent so the field has O(1) derivatives
    on any surface size; coefficients are standard normal over all monomials of
    total degree <= ``degree``.
    """
    x = atlas.geometry.x / np.abs(atlas.geometry.x).max()
    powers = [(i, j, k) for i in range(degree + 1) for j in range(degree + 1 - i)
              for k in range(degree + 1 - i - j)]
    coef = rng.standard_normal((len(powers), 3))
    vals = np.zeros((atlas.n_nodes, 3))
    for (i, j, k), c in zip(powers, coef):
        vals += (x[:, 0] ** i * x[:, 1] ** j * x[:, 2] ** k)[:, None] * c
    return TangentField(atlas, vals)
