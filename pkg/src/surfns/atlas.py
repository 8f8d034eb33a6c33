"""Closed surfaces as atlases of structured-grid charts.

A chart is a rectangular parameter grid with an analytic embedding into R^3.
Every physical grid node is *owned* by exactly one chart (the one with the
largest partition-of-unity weight, ties to the lower chart index).  All other
chart nodes -- the overlap band and the halo ring used by the finite-difference
stencils -- are filled by tensor Lagrange interpolation from the partner chart.
A field is therefore determined by its values on owned nodes.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import ellipeinc, ellipkinc

log = logging.getLogger(__name__)

# Yang chart = Yin chart rotated by (x, y, z) -> (-x, z, y); proper rotation, involution.
YANG_ROTATION = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

YIN_LON_HALF = 0.75 * math.pi
YIN_COLAT_HALF = 0.25 * math.pi
DEFAULT_TAPER = 0.45
DEFAULT_INTERP_ORDER = 8


class GeometryError(ValueError):
    """Surface parameters do not describe a valid embedded surface."""


class ResolutionError(ValueError):
    """Grid too coarse (or malformed) for the stencils in use."""


class AtlasError(RuntimeError):
    """Inconsistent atlas construction (halo plan cannot be satisfied)."""


class OutOfTubeError(RuntimeError):
    """Closest-point search left the tubular neighbourhood of the surface."""


def smooth_step(t, sharpness: float = 2.0):
    """C-infinity step: 1 for t <= 0, 0 for t >= 1, all derivatives flat at both ends.

    The transition is the logistic of sharpness*(1/(1-t) - 1/t); sharpness 2 gave the
    fastest decay of the rectangle-rule error for the overlap widths used here.
    """
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    out = np.zeros_like(t)
    out[t <= 0.0] = 1.0
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    z = sharpness * (1.0 / (1.0 - tm) - 1.0 / tm)
    out[mid] = 0.5 * (1.0 - np.tanh(0.5 * z))
    return out


def lagrange_weights(s, order):
    """Equispaced Lagrange weights for nodes 0..order-1 at fractional positions s.

    Returns an array of shape s.shape + (order,).
    """
    s = np.asarray(s, dtype=float)
    w = np.ones(s.shape + (order,))
    for j in range(order):
        for m in range(order):
            if m != j:
                w[..., j] *= (s - m) / (j - m)
    return w


@dataclass
class Chart:
    """One structured parameter grid with an analytic embedding."""

    name: str
    t1: np.ndarray
    t2: np.ndarray
    periodic: tuple
    embed: Callable
    params_of: Callable
    raw_weight: Callable
    orientation: float = 1.0
    normal_derivative: Optional[Callable] = None
    halo_width: int = 2
    quad_rings: int = 0

    @property
    def h1(self) -> float:
        return float(self.t1[1] - self.t1[0])

    @property
    def h2(self) -> float:
        return float(self.t2[1] - self.t2[0])

    @property
    def shape(self) -> tuple:
        return (self.t1.size, self.t2.size)

    @property
    def size(self) -> int:
        return self.t1.size * self.t2.size

    def mesh(self):
        return np.meshgrid(self.t1, self.t2, indexing="ij")

    def fractional_index(self, s1, s2):
        f1 = (np.asarray(s1) - self.t1[0]) / self.h1
        f2 = (np.asarray(s2) - self.t2[0]) / self.h2
        if self.periodic[0]:
            f1 = np.mod(f1, self.t1.size)
        if self.periodic[1]:
            f2 = np.mod(f2, self.t2.size)
        return f1, f2

    def stencil(self, s1, s2, order):
        """Flat node indices and weights of the tensor interpolation stencil at (s1, s2).

        Raises AtlasError when a stencil leaves a non-periodic grid.
        """
        f1, f2 = self.fractional_index(s1, s2)
        shift = order // 2 - 1
        i0 = np.floor(f1).astype(int) - shift
        j0 = np.floor(f2).astype(int) - shift
        w1 = lagrange_weights(f1 - i0, order)
        w2 = lagrange_weights(f2 - j0, order)
        ii = i0[..., None] + np.arange(order)
        jj = j0[..., None] + np.arange(order)
        n1, n2 = self.shape
        if self.periodic[0]:
            ii = np.mod(ii, n1)
        elif ii.min(initial=0) < 0 or ii.max(initial=0) >= n1:
            raise AtlasError(f"interpolation stencil leaves chart {self.name} (axis 1)")
        if self.periodic[1]:
            jj = np.mod(jj, n2)
        elif jj.min(initial=0) < 0 or jj.max(initial=0) >= n2:
            raise AtlasError(f"interpolation stencil leaves chart {self.name} (axis 2)")
        idx = ii[..., :, None] * n2 + jj[..., None, :]
        wts = w1[..., :, None] * w2[..., None, :]
        shape = np.shape(s1) + (order * order,)
        return idx.reshape(shape), wts.reshape(shape)


@dataclass
class GeometryCache:
    """Pointwise differential geometry at every chart node (flat over the atlas).

    tau[n, i] is the tangent vector dx/dtheta^i, tau_dual[n, i] the dual basis
    vector tau^i; christoffel[n, k, i, j] = Lambda^k_ij; weingarten[n, i, j] = l^i_j;
    weingarten3 is the ambient 3x3 representation of the shape operator L.
    """

    x: np.ndarray
    tau: np.ndarray
    tau_dual: np.ndarray
    metric: np.ndarray
    metric_inv: np.ndarray
    sqrt_det: np.ndarray
    christoffel: np.ndarray
    second_form: np.ndarray
    weingarten: np.ndarray
    weingarten3: np.ndarray
    mean_curvature: np.ndarray
    gauss_curvature: np.ndarray
    normal: np.ndarray
    projector: np.ndarray
    dnormal: Optional[np.ndarray] = None

    @classmethod
    def from_derivatives(cls, d, orientation, dnormal=None):
        x1, x2 = d["x1"], d["x2"]
        tau = np.stack([x1, x2], axis=-2)
        g = np.einsum("nia,nja->nij", tau, tau)
        det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] ** 2
        if np.any(det <= 0.0):
            raise GeometryError("embedding is not an immersion (det g <= 0)")
        ginv = np.empty_like(g)
        ginv[:, 0, 0] = g[:, 1, 1] / det
        ginv[:, 1, 1] = g[:, 0, 0] / det
        ginv[:, 0, 1] = ginv[:, 1, 0] = -g[:, 0, 1] / det
        tau_dual = np.einsum("nij,nja->nia", ginv, tau)
        cross = np.cross(x1, x2)
        nu = orientation[:, None] * cross / np.linalg.norm(cross, axis=1)[:, None]
        xx = np.stack(
            [np.stack([d["x11"], d["x12"]], axis=1), np.stack([d["x12"], d["x22"]], axis=1)],
            axis=1,
        )
        l = np.einsum("nija,na->nij", xx, nu)
        lam = np.einsum("nija,nka->nkij", xx, tau_dual)
        weing = np.einsum("nik,nkj->nij", ginv, l)
        kappa = weing[:, 0, 0] + weing[:, 1, 1]
        gauss = weing[:, 0, 0] * weing[:, 1, 1] - weing[:, 0, 1] * weing[:, 1, 0]
        proj = np.eye(3)[None] - nu[:, :, None] * nu[:, None, :]
        L3 = np.einsum("nik,nka,nib->nab", l, tau_dual, tau_dual)
        return cls(
            x=d["x"], tau=tau, tau_dual=tau_dual, metric=g, metric_inv=ginv,
            sqrt_det=np.sqrt(det), christoffel=lam, second_form=l, weingarten=weing,
            weingarten3=L3, mean_curvature=kappa, gauss_curvature=gauss, normal=nu,
            projector=proj, dnormal=dnormal,
        )

    def identity_residuals(self, mask=None):
        """Max residuals of the pointwise identities the cache must satisfy."""
        sel = slice(None) if mask is None else mask
        tau, dual = self.tau[sel], self.tau_dual[sel]
        eye2 = np.eye(2)[None]
        eye3 = np.eye(3)[None]
        P, L, nu = self.projector[sel], self.weingarten3[sel], self.normal[sel]
        kappa, K = self.mean_curvature[sel], self.gauss_curvature[sel]
        res = {
            "dual_basis": np.abs(np.einsum("nia,nja->nij", dual, tau) - eye2).max(),
            "metric_inverse": np.abs(
                np.einsum("nik,nkj->nij", self.metric_inv[sel], self.metric[sel]) - eye2
            ).max(),
            "unit_normal": np.abs(np.linalg.norm(nu, axis=1) - 1.0).max(),
            "projector_normal": np.abs(np.einsum("nab,nb->na", P, nu)).max(),
            "projector_idempotent": np.abs(P @ P - P).max(),
            "mean_curvature_trace": np.abs(np.trace(L, axis1=1, axis2=2) - kappa).max(),
            "gauss_equation": np.abs(
                kappa[:, None, None] * L - L @ L - K[:, None, None] * P
            ).max(),
        }
        if self.dnormal is not None:
            # L tau_j = -d_j nu
            Ltau = np.einsum("nab,njb->nja", L, tau)
            res["weingarten"] = np.abs(Ltau + self.dnormal[sel]).max()
        del eye3
        return res


@dataclass
class HaloPlan:
    """Interpolation plan filling every non-owned node from owned partner values."""

    owned: np.ndarray
    nonowned: np.ndarray
    partner: np.ndarray
    from_owned: sp.csr_matrix
    from_nonowned: sp.csr_matrix
    _lu: object = None
    _chain: np.ndarray = None

    def __post_init__(self):
        In = self.from_nonowned.tocsr()
        if In.nnz:
            # only nodes on interpolation chains need the solve; the rest copy the rhs
            self._chain = np.union1d(np.flatnonzero(np.diff(In.indptr) > 0), In.indices)
            A = sp.identity(self._chain.size, format="csc") - In[self._chain][:, self._chain].tocsc()
            self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))

    def _solve(self, rhs, trans="N"):
        if self._lu is None:
            return rhs
        out = np.array(rhs, dtype=float, copy=True)
        out[self._chain] = self._lu.solve(np.ascontiguousarray(rhs[self._chain]), trans=trans)
        return out

    def apply(self, owned_values: np.ndarray) -> np.ndarray:
        return self._solve(self.from_owned @ owned_values)

    def apply_transpose(self, nonowned_values: np.ndarray) -> np.ndarray:
        """Adjoint of ``apply``: maps non-owned node weights back to owned nodes."""
        return self.from_owned.T @ self._solve(np.asarray(nonowned_values, dtype=float), "T")


@dataclass
class SurfaceAtlas:
    """A closed surface covered by one or two structured charts."""

    kind: str
    params: dict
    charts: list
    geometry: GeometryCache
    weight: np.ndarray
    owned: np.ndarray
    halo: HaloPlan
    quad_weights: np.ndarray
    resolution: int
    interp_order: int = DEFAULT_INTERP_ORDER
    closest: Optional[Callable] = None
    offsets: list = field(default_factory=list)
    # quadrature-only nodes: the part of each chart's taper band outside its stored array
    ring_weights: np.ndarray = None
    ring_interp: sp.csr_matrix = None
    ring_projector: np.ndarray = None

    @property
    def n_nodes(self) -> int:
        return self.geometry.x.shape[0]

    @property
    def h(self) -> float:
        """Largest parameter spacing (radians for the built-in charts)."""
        return max(max(c.h1, c.h2) for c in self.charts)

    @property
    def active(self) -> np.ndarray:
        return self.weight > 0.0

    @property
    def owned_index(self) -> np.ndarray:
        return self.halo.owned

    def chart_slice(self, k: int) -> slice:
        return slice(self.offsets[k], self.offsets[k] + self.charts[k].size)

    def chart_view(self, values: np.ndarray, k: int) -> np.ndarray:
        c = self.charts[k]
        return values[self.chart_slice(k)].reshape(c.shape + values.shape[1:])

    def expand(self, owned_values: np.ndarray) -> np.ndarray:
        """Full node array (N, ...) from values on owned nodes (halo-exchanged)."""
        owned_values = np.asarray(owned_values, dtype=float)
        out = np.empty((self.n_nodes,) + owned_values.shape[1:])
        out[self.halo.owned] = owned_values
        if self.halo.nonowned.size:
            flat = owned_values.reshape(owned_values.shape[0], -1)
            out[self.halo.nonowned] = self.halo.apply(flat).reshape(
                (self.halo.nonowned.size,) + owned_values.shape[1:])
        return out

    def ring_values(self, values: np.ndarray, tangent: bool = False) -> np.ndarray:
        """Interpolated values at the quadrature-only nodes."""
        flat = np.asarray(values).reshape(values.shape[0], -1)
        out = (self.ring_interp @ flat).reshape((self.ring_weights.size,) + values.shape[1:])
        if tangent and out.ndim == 2:
            out = np.einsum("nab,nb->na", self.ring_projector, out)
        elif tangent and out.ndim == 3:
            out = self.ring_projector @ out @ self.ring_projector
        return out

    @functools.cached_property
    def linear_quad_weights(self) -> np.ndarray:
        """Weights w on stored nodes with integral(f) = w . f for any field f."""
        return self.quad_weights + self.ring_interp.T @ self.ring_weights

    @functools.cached_property
    def owned_quad_weights(self) -> np.ndarray:
        """Quadrature weights acting on owned values: integral = w . f[owned] exactly."""
        wl = self.linear_quad_weights
        w = wl[self.halo.owned].copy()
        if self.halo.nonowned.size:
            w += self.halo.apply_transpose(wl[self.halo.nonowned])
        return w

    def integrate(self, values: np.ndarray) -> float:
        """PoU-weighted rectangle rule of a nodal scalar array (stored + ring nodes)."""
        return float(self.quad_weights @ values + self.ring_weights @ (self.ring_interp @ values))

    def area(self) -> float:
        return float(self.quad_weights.sum() + self.ring_weights.sum())

    def halo_exchange(self, values: np.ndarray, tangent: bool = False) -> np.ndarray:
        """Overwrite non-owned node values with interpolants of owned values.

        Works on arrays of shape (N,), (N, 3) or (N, 3, 3).  Tangent vectors are
        exchanged in ambient components and re-projected at the receiving node;
        3x3 tensors are sandwiched by the receiving projector.
        """
        out = np.array(values, dtype=float, copy=True)
        nonowned = self.halo.nonowned
        if nonowned.size == 0:
            return out
        src = out[self.halo.owned].reshape(self.halo.owned.size, -1)
        filled = self.halo.apply(src).reshape((nonowned.size,) + out.shape[1:])
        if out.ndim == 2 and tangent:
            P = self.geometry.projector[nonowned]
            filled = np.einsum("nab,nb->na", P, filled)
        elif out.ndim == 3 and tangent:
            P = self.geometry.projector[nonowned]
            filled = P @ filled @ P
        out[nonowned] = filled
        return out

    def pou_at(self, points: np.ndarray) -> np.ndarray:
        """Normalised partition-of-unity weights of each chart at surface points."""
        raw = np.stack([c.raw_weight(*c.params_of(points)) for c in self.charts], axis=-1)
        return raw / raw.sum(axis=-1, keepdims=True)

    def embed_point(self, chart: int, s1, s2) -> np.ndarray:
        c = self.charts[chart]
        return c.embed(np.atleast_1d(s1), np.atleast_1d(s2))["x"]

    def closest_point(self, y):
        """Closest surface point to ``y``: (chart index, theta1, theta2, point).

        Analytic for the sphere (any y other than the centre) and the torus
        (distance to the surface below r); damped Newton for the ellipsoid.  Raises
        OutOfTubeError outside the tubular neighbourhood.
        """
        return self.closest(self, np.asarray(y, dtype=float))


# ---------------------------------------------------------------------------
# chart factories


def _torus_chart(R, r, n1, n2):
    def embed(T, F):
        ct, st, cf, sf = np.cos(T), np.sin(T), np.cos(F), np.sin(F)
        rho = R + r * cf
        z = np.zeros_like(T)
        d = {
            "x": np.stack([rho * ct, rho * st, r * sf], -1),
            "x1": np.stack([-rho * st, rho * ct, z], -1),
            "x2": np.stack([-r * sf * ct, -r * sf * st, r * cf], -1),
            "x11": np.stack([-rho * ct, -rho * st, z], -1),
            "x12": np.stack([r * sf * st, -r * sf * ct, z], -1),
            "x22": np.stack([-r * cf * ct, -r * cf * st, -r * sf], -1),
        }
        return d

    def params_of(p):
        p = np.asarray(p)
        th = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2 * math.pi)
        rho = np.hypot(p[..., 0], p[..., 1])
        ph = np.mod(np.arctan2(p[..., 2], rho - R), 2 * math.pi)
        return th, ph

    def dnormal(T, F):
        ct, st, cf, sf = np.cos(T), np.sin(T), np.cos(F), np.sin(F)
        z = np.zeros_like(T)
        return np.stack(
            [np.stack([-cf * st, cf * ct, z], -1), np.stack([-sf * ct, -sf * st, cf], -1)],
            axis=-2,
        )

    return Chart(
        name="torus",
        t1=np.arange(n1) * (2 * math.pi / n1),
        t2=np.arange(n2) * (2 * math.pi / n2),
        periodic=(True, True),
        embed=embed,
        params_of=params_of,
        raw_weight=lambda a, b: np.ones(np.broadcast(a, b).shape),
        normal_derivative=dnormal,
    )


def _lat_lon_chart(name, rotation, axes, n, taper, ext, rings):
    M = np.diag(axes) @ rotation
    Minv = np.linalg.inv(M)
    A2 = np.diag(1.0 / np.asarray(axes) ** 2)
    h = 0.5 * math.pi / n
    t1 = (np.arange(3 * n + 1 + 2 * ext) - (1.5 * n + ext)) * h
    t2 = 0.5 * math.pi + (np.arange(n + 1 + 2 * ext) - (0.5 * n + ext)) * h

    def embed(T, F):
        ct, st, cf, sf = np.cos(T), np.sin(T), np.cos(F), np.sin(F)
        z = np.zeros_like(T)
        s = {
            "x": np.stack([sf * ct, sf * st, cf], -1),
            "x1": np.stack([-sf * st, sf * ct, z], -1),
            "x2": np.stack([cf * ct, cf * st, -sf], -1),
            "x11": np.stack([-sf * ct, -sf * st, z], -1),
            "x12": np.stack([-cf * st, cf * ct, z], -1),
            "x22": np.stack([-sf * ct, -sf * st, -cf], -1),
        }
        return {k: v @ M.T for k, v in s.items()}

    def params_of(p):
        s = np.asarray(p) @ Minv.T
        s = s / np.linalg.norm(s, axis=-1, keepdims=True)
        return np.arctan2(s[..., 1], s[..., 0]), np.arccos(np.clip(s[..., 2], -1.0, 1.0))

    def raw_weight(lon, colat):
        d1 = (np.abs(lon) - YIN_LON_HALF) / taper
        d2 = (np.abs(colat - 0.5 * math.pi) - YIN_COLAT_HALF) / taper
        return smooth_step(d1) * smooth_step(d2)

    def dnormal(T, F):
        d = embed(T, F)
        q = d["x"] @ A2
        qn = np.linalg.norm(q, axis=-1, keepdims=True)
        nu = q / qn
        out = []
        for key in ("x1", "x2"):
            dq = d[key] @ A2
            out.append((dq - nu * np.sum(nu * dq, axis=-1, keepdims=True)) / qn)
        return np.stack(out, axis=-2)

    return Chart(
        name=name, t1=t1, t2=t2, periodic=(False, False), embed=embed,
        params_of=params_of, raw_weight=raw_weight, normal_derivative=dnormal,
        quad_rings=rings,
    )


# ---------------------------------------------------------------------------
# assembly


def _assemble(kind, params, charts, resolution, interp_order, closest, outward):
    offsets, acc = [], 0
    for c in charts:
        offsets.append(acc)
        acc += c.size

    derivs, dnormals, orient = [], [], []
    for c in charts:
        T1, T2 = c.mesh()
        d = {k: v.reshape(-1, 3) for k, v in c.embed(T1, T2).items()}
        derivs.append(d)
        cross = np.cross(d["x1"], d["x2"])
        s = np.sign(np.einsum("na,na->n", cross, outward(d["x"])))
        if np.any(s != s[0]):
            raise GeometryError(f"chart {c.name} is not consistently oriented")
        c.orientation = float(s[0])
        orient.append(np.full(c.size, s[0]))
        if c.normal_derivative is not None:
            dnormals.append(c.normal_derivative(T1, T2).reshape(-1, 2, 3))
    merged = {k: np.concatenate([d[k] for d in derivs]) for k in derivs[0]}
    dn = np.concatenate(dnormals) if len(dnormals) == len(charts) else None
    geo = GeometryCache.from_derivatives(merged, np.concatenate(orient), dn)

    # raw weights of every chart at every node
    X = geo.x
    raw = np.stack([c.raw_weight(*c.params_of(X)) for c in charts], axis=-1)
    for k, c in enumerate(charts):
        T1, T2 = c.mesh()
        raw[offsets[k]:offsets[k] + c.size, k] = c.raw_weight(T1, T2).ravel()
    total = raw.sum(axis=1)
    if np.any(total <= 0.0):
        raise AtlasError("charts do not cover the surface")
    node_chart = np.concatenate([np.full(c.size, k) for k, c in enumerate(charts)])
    psi_all = raw / total[:, None]
    weight = psi_all[np.arange(acc), node_chart]
    owner = np.argmax(raw, axis=1)
    owned_mask = owner == node_chart

    owned = np.flatnonzero(owned_mask)
    nonowned = np.flatnonzero(~owned_mask)
    partner = owner[nonowned]
    own_pos = -np.ones(acc, dtype=int)
    own_pos[owned] = np.arange(owned.size)
    non_pos = -np.ones(acc, dtype=int)
    non_pos[nonowned] = np.arange(nonowned.size)

    rows, cols, vals = [], [], []
    for k, c in enumerate(charts):
        sel = np.flatnonzero(partner == k)
        if sel.size == 0:
            continue
        s1, s2 = c.params_of(X[nonowned[sel]])
        idx, w = c.stencil(s1, s2, interp_order)
        rows.append(np.repeat(sel, idx.shape[1]))
        cols.append((idx + offsets[k]).ravel())
        vals.append(w.ravel())
    n_non = nonowned.size
    if n_non:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        is_own = own_pos[cols] >= 0
        from_owned = sp.csr_matrix(
            (vals[is_own], (rows[is_own], own_pos[cols[is_own]])), shape=(n_non, owned.size)
        )
        from_non = sp.csr_matrix(
            (vals[~is_own], (rows[~is_own], non_pos[cols[~is_own]])), shape=(n_non, n_non)
        )
    else:
        from_owned = sp.csr_matrix((0, owned.size))
        from_non = sp.csr_matrix((0, 0))
    halo = HaloPlan(owned=owned, nonowned=nonowned, partner=partner,
                    from_owned=from_owned, from_nonowned=from_non)

    h12 = np.concatenate([np.full(c.size, c.h1 * c.h2) for c in charts])
    quad = weight * geo.sqrt_det * h12
    ring_w, ring_I, ring_P = _ring_nodes(charts, offsets, acc, interp_order, outward)
    atlas = SurfaceAtlas(
        kind=kind, params=params, charts=charts, geometry=geo, weight=weight,
        owned=owned_mask, halo=halo, quad_weights=quad, resolution=resolution,
        interp_order=interp_order, closest=closest, offsets=offsets,
        ring_weights=ring_w, ring_interp=ring_I, ring_projector=ring_P,
    )
    res = geo.identity_residuals(atlas.active)
    bad = {k: v for k, v in res.items() if v > 1e-10}
    if bad:
        raise GeometryError(f"geometry identities violated: {bad}")
    return atlas


def _ring_nodes(charts, offsets, n_nodes, interp_order, outward):
    """Quadrature-only nodes beyond each chart's stored array where its PoU weight is positive.

    Returns their quadrature weights psi*sqrt(g)*h1*h2, the sparse interpolation
    matrix from stored nodes of the owning partner chart, and their projectors.
    """
    weights, rows, cols, vals, projs = [], [], [], [], []
    count = 0
    for k, c in enumerate(charts):
        q = c.quad_rings
        if q <= 0:
            continue
        n1, n2 = c.shape
        i = np.arange(-q, n1 + q)
        j = np.arange(-q, n2 + q)
        I, J = np.meshgrid(i, j, indexing="ij")
        outside = (I < 0) | (I >= n1) | (J < 0) | (J >= n2)
        T1 = c.t1[0] + I[outside] * c.h1
        T2 = c.t2[0] + J[outside] * c.h2
        w_self = c.raw_weight(T1, T2)
        keep = w_self > 0.0
        T1, T2, w_self = T1[keep], T2[keep], w_self[keep]
        d = c.embed(T1, T2)
        x = d["x"]
        cross = np.cross(d["x1"], d["x2"])
        sqrt_g = np.linalg.norm(cross, axis=1)
        nu = cross / sqrt_g[:, None]
        nu *= np.sign(np.einsum("na,na->n", nu, outward(x)))[:, None]
        raw = np.stack([ch.raw_weight(*ch.params_of(x)) for ch in charts], axis=-1)
        raw[:, k] = w_self
        owner = np.argmax(raw, axis=1)
        if np.any(owner == k):
            raise AtlasError(f"quadrature ring of chart {c.name} is owned by the chart itself")
        psi = w_self / raw.sum(axis=1)
        weights.append(psi * sqrt_g * c.h1 * c.h2)
        projs.append(np.eye(3)[None] - nu[:, :, None] * nu[:, None, :])
        for p in np.unique(owner):
            sel = np.flatnonzero(owner == p)
            s1, s2 = charts[p].params_of(x[sel])
            idx, w = charts[p].stencil(s1, s2, interp_order)
            rows.append(np.repeat(count + sel, idx.shape[1]))
            cols.append((idx + offsets[p]).ravel())
            vals.append(w.ravel())
        count += T1.size
    if count == 0:
        return np.zeros(0), sp.csr_matrix((0, n_nodes)), np.zeros((0, 3, 3))
    I_ring = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(count, n_nodes)
    )
    return np.concatenate(weights), I_ring, np.concatenate(projs)


def build_torus(R: float = 2.0, r: float = 1.0, n_theta: int = 64, n_phi: int = 64) -> SurfaceAtlas:
    """Torus of revolution about the x3-axis on a single doubly periodic chart.

    theta is the angle about the x3-axis, phi the angle around the tube.
    """
    if not (0.0 < r < R):
        raise GeometryError(f"torus needs 0 < r < R, got R={R}, r={r}")
    for n in (n_theta, n_phi):
        if n < 16 or n % 2:
            raise ResolutionError(f"torus grid sizes must be even and >= 16, got {n}")
    chart = _torus_chart(R, r, n_theta, n_phi)

    def outward(x):
        rho = np.hypot(x[:, 0], x[:, 1])
        c = np.stack([R * x[:, 0] / rho, R * x[:, 1] / rho, np.zeros_like(rho)], -1)
        return x - c

    def closest(atlas, y):
        th, ph = chart.params_of(y)
        rho = math.hypot(y[0], y[1])
        if abs(math.hypot(rho - R, y[2]) - r) >= r:
            raise OutOfTubeError("point outside the torus tubular neighbourhood")
        return 0, float(th), float(ph), chart.embed(np.array([th]), np.array([ph]))["x"][0]

    return _assemble("torus", {"R": R, "r": r, "n_theta": n_theta, "n_phi": n_phi},
                     [chart], min(n_theta, n_phi), DEFAULT_INTERP_ORDER, closest, outward)


def build_ellipsoid(a: float, b: float, c: float, n: int = 64, taper: float | None = None,
                    interp_order: int = DEFAULT_INTERP_ORDER) -> SurfaceAtlas:
    """Axis-aligned ellipsoid on a Yin-Yang pair of rotated latitude-longitude charts.

    ``n`` is the number of grid intervals across the 90 degree colatitude band of
    each chart's core; the longitude band is three times wider.
    """
    axes = (float(a), float(b), float(c))
    if min(axes) <= 0.0:
        raise GeometryError(f"semi-axes must be positive, got {axes}")
    if n < 16:
        raise ResolutionError(f"sphere/ellipsoid resolution must be >= 16, got {n}")
    if interp_order not in (4, 6, 8):
        raise ResolutionError("interp_order must be 4, 6 or 8")
    h = 0.5 * math.pi / n
    if taper is None:
        taper = DEFAULT_TAPER
    # stored margin: finite-difference support and partner interpolation stencils;
    # the rest of the taper band is covered by quadrature-only rings
    ext = interp_order // 2 + 2
    rings = max(int(math.ceil(taper / h)) + 1 - ext, 0)
    if YIN_COLAT_HALF + (ext + rings + 1) * h >= 0.5 * math.pi:
        raise ResolutionError("taper too wide for this resolution: chart would reach a pole")
    yin = _lat_lon_chart("yin", np.eye(3), axes, n, taper, ext, rings)
    yang = _lat_lon_chart("yang", YANG_ROTATION, axes, n, taper, ext, rings)
    Ainv2 = np.diag(1.0 / np.asarray(axes) ** 2)
    spherical = axes[0] == axes[1] == axes[2]
    kind = "sphere" if spherical else "ellipsoid"

    def outward(x):
        return x @ Ainv2

    def closest(atlas, y):
        return _ellipsoid_closest(atlas, y, axes, spherical)

    params = {"a": axes[0], "b": axes[1], "c": axes[2], "n": n, "taper": taper}
    if spherical:
        params = {"radius": axes[0], "n": n, "taper": taper}
    return _assemble(kind, params, [yin, yang], n, interp_order, closest, outward)


def build_sphere(radius: float = 1.0, n: int = 64, **kw) -> SurfaceAtlas:
    """Sphere of the given radius on a Yin-Yang atlas."""
    if radius <= 0.0:
        raise GeometryError("radius must be positive")
    return build_ellipsoid(radius, radius, radius, n, **kw)


def _owner_chart(atlas, p):
    w = atlas.pou_at(p[None])[0]
    return int(np.argmax(w))


def _ellipsoid_closest(atlas, y, axes, spherical, tol=1e-12, maxiter=50):
    A = np.asarray(axes)
    ynorm = np.linalg.norm(y / A)
    if ynorm == 0.0:
        raise OutOfTubeError("closest point undefined at the centre")
    if spherical:
        p = y / np.linalg.norm(y) * A[0]
        k = _owner_chart(atlas, p)
        s1, s2 = atlas.charts[k].params_of(p)
        return k, float(s1), float(s2), p
    p0 = y / ynorm
    k = _owner_chart(atlas, p0)
    chart = atlas.charts[k]
    s = np.array(chart.params_of(p0), dtype=float)
    scale = max(axes)
    for _ in range(maxiter):
        d = chart.embed(np.array([s[0]]), np.array([s[1]]))
        r = d["x"][0] - y
        J = np.stack([d["x1"][0], d["x2"][0]], axis=1)
        grad = J.T @ r
        if np.linalg.norm(grad) <= tol * scale * scale:
            break
        H = J.T @ J + np.array(
            [[r @ d["x11"][0], r @ d["x12"][0]], [r @ d["x12"][0], r @ d["x22"][0]]]
        )
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = -grad
        if grad @ step >= 0.0:
            step = -grad
        if np.linalg.norm(step) <= 1e-6:
            # quadratic-convergence regime: the decrease of |r|^2 is below roundoff
            s = s + step
            continue
        f0 = 0.5 * r @ r
        lam = 1.0
        for _ in range(30):
            cand = s + lam * step
            xc = chart.embed(np.array([cand[0]]), np.array([cand[1]]))["x"][0]
            if 0.5 * np.sum((xc - y) ** 2) <= f0 + 1e-4 * lam * (grad @ step):
                break
            lam *= 0.5
        s = cand
    else:
        raise OutOfTubeError("closest-point Newton iteration did not converge")
    p = chart.embed(np.array([s[0]]), np.array([s[1]]))["x"][0]
    if np.linalg.norm(p - y) >= 0.5 * min(axes):
        raise OutOfTubeError("point outside the tubular neighbourhood")
    k2 = _owner_chart(atlas, p)
    if k2 != k:
        s1, s2 = atlas.charts[k2].params_of(p)
        return k2, float(s1), float(s2), p
    return k, float(s[0]), float(s[1]), p


def integrate_scalar(atlas: SurfaceAtlas, values: np.ndarray) -> float:
    """Partition-of-unity weighted rectangle rule over all chart nodes."""
    v = getattr(values, "values", values)
    return atlas.integrate(np.asarray(v, dtype=float))


def ellipsoid_area(a: float, b: float, c: float) -> float:
    """Closed-form surface area of an ellipsoid via incomplete elliptic integrals."""
    a, b, c = sorted((a, b, c), reverse=True)
    if math.isclose(a, c):
        return 4.0 * math.pi * a * a
    phi = math.acos(c / a)
    k2 = a * a * (b * b - c * c) / (b * b * (a * a - c * c))
    s = math.sin(phi)
    return 2.0 * math.pi * c * c + 2.0 * math.pi * a * b / s * (
        ellipeinc(phi, k2) * s * s + ellipkinc(phi, k2) * math.cos(phi) ** 2
    )
