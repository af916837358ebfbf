"""Smooth partition of unity subordinate to the boundary balls and the eroded interior."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import make_interp_spline
from scipy.special import betainc

from .geometry import Atlas, GeometryError
from .mollify import Kernel, bump, kernel_constant

# all radii below are fractions of R
BALL_RADIUS = 3 / 16
BALL_SMOOTHING = 1 / 32
INTERIOR_SMOOTHING = 1 / 64
INTERIOR_THRESHOLD = 3 / 64
LATTICE_STEP = 1 / 512
PROFILE_NODES = 257


def sphere_fraction(dim: int, s, r, a: float):
    """Fraction of the sphere ``|y - x| = r`` (with ``|x| = s``) inside ``B_a(0)``."""
    s = np.asarray(s, dtype=float)
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = (a * a - s * s - r * r) / (2 * s * r)
    c = np.where((s == 0) | (r == 0), np.where(s + r < a, 1.0, -1.0), c)
    c = np.clip(c, -1.0, 1.0)
    if dim == 1:
        return (np.sign(a - (s + r)) + np.sign(a - np.abs(s - r)) + 2) / 4
    h = (dim - 1) / 2
    return betainc(h, h, (1 + c) / 2)


def profile_value(dim: int, s: float, a: float = BALL_RADIUS, eps: float = BALL_SMOOTHING) -> float:
    """``(rho_eps * 1_{B_a})(x)`` at ``|x| = s`` by adaptive quadrature."""
    if s <= a - eps:
        return 1.0
    if s >= a + eps:
        return 0.0
    area = 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)
    c = kernel_constant(dim)

    def integrand(u):
        return float(bump(u * u)) * u ** (dim - 1) * float(sphere_fraction(dim, s, eps * u, a))

    kink = abs(a - s) / eps
    pts = [kink] if 0 < kink < 1 else None
    val = quad(integrand, 0.0, 1.0, points=pts, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    return c * area * val


@dataclass(frozen=True)
class RadialProfile:
    """Smooth step ``P(s)``: one for ``s <= a - eps``, zero for ``s >= a + eps``.

    Stored as a quintic spline in units of ``R`` with vanishing first and
    second derivatives at both ends, so ``P(|x - c|)`` is globally C^2.
    """

    dim: int
    a: float
    eps: float
    spline: object

    def __call__(self, s, order: int = 0):
        s = np.asarray(s, dtype=float)
        lo, hi = self.a - self.eps, self.a + self.eps
        mid = (s > lo) & (s < hi)
        out = []
        for k in range(order + 1):
            v = np.zeros_like(s)
            if k == 0:
                v[s <= lo] = 1.0
            if np.any(mid):
                v[mid] = self.spline(s[mid], k)
            if k == 0:
                v = np.clip(v, 0.0, 1.0)
            out.append(v)
        return tuple(out)


@lru_cache(maxsize=None)
def radial_profile(dim: int) -> RadialProfile:
    a, eps = BALL_RADIUS, BALL_SMOOTHING
    s = np.linspace(a - eps, a + eps, PROFILE_NODES)
    vals = np.array([profile_value(dim, t, a, eps) for t in s])
    vals[0], vals[-1] = 1.0, 0.0
    flat = [(1, 0.0), (2, 0.0)]
    spline = make_interp_spline(s, vals, k=5, bc_type=(flat, flat))
    return RadialProfile(dim, a, eps, spline)


@dataclass
class PartitionValues:
    """Partition evaluated at ``P`` points.

    ``idx[p, k]`` is the k-th candidate chart of point p (``-1`` pads);
    ``xi``, ``dxi``, ``d2xi`` hold the matching ``xi_j`` and derivatives.
    """

    idx: np.ndarray
    xi: np.ndarray
    xi0: np.ndarray
    total: np.ndarray
    dxi: Optional[np.ndarray] = None
    dxi0: Optional[np.ndarray] = None
    d2xi: Optional[np.ndarray] = None
    d2xi0: Optional[np.ndarray] = None

    @property
    def in_cover(self) -> np.ndarray:
        return self.total > 0


class Partition:
    """Bumps ``eta_i`` around the centers, the interior bump ``eta_0``, and ``xi = eta / sum eta``.

    ``eta_i(x) = P(|x - x^i| / R)`` with the radial profile ``P``.
    ``eta_0`` is a normalized lattice sum of the interior kernel over the
    lattice points of ``{d > 3R/64}`` (spacing ``R/512``), which equals the
    discrete convolution exactly and is smooth in ``x``.
    """

    def __init__(self, atlas: Atlas):
        self.atlas = atlas
        self.dim = atlas.dim
        R = atlas.R
        self.R = R
        self.profile = radial_profile(self.dim)
        self.reach = (BALL_RADIUS + BALL_SMOOTHING) * R
        self.inner_eps = INTERIOR_SMOOTHING * R
        self.inner_threshold = INTERIOR_THRESHOLD * R
        self.h = LATTICE_STEP * R
        k = int(math.ceil(self.inner_eps / self.h))
        offs = np.array(list(product(range(-k - 1, k + 2), repeat=self.dim)), dtype=float)
        self._offsets = offs[np.linalg.norm(offs, axis=1) <= k + 1.5]
        self._kernel = Kernel(self.dim)
        self._check_cover()

    def _check_cover(self):
        d, _ = self.atlas.center_tree.query(self.atlas.sample.points)
        if np.any(d >= self.R / 8):
            raise GeometryError("atlas covering violated: a boundary sample lies in no B_{R/8}(x^i)")

    # --- boundary bumps ------------------------------------------------------

    def neighbours(self, X: np.ndarray):
        """Indices (padded with -1) and offsets ``x - x^j`` of centers within reach."""
        tree = self.atlas.center_tree
        counts = tree.query_ball_point(X, self.reach, return_length=True)
        K = max(int(np.max(counts)) if len(X) else 0, 1)
        dist, idx = tree.query(X, k=K, distance_upper_bound=self.reach)
        dist = dist.reshape(len(X), K)
        idx = idx.reshape(len(X), K)
        valid = np.isfinite(dist) & (dist < self.reach)
        idx = np.where(valid, idx, -1)
        diff = X[:, None, :] - self.atlas.centers[np.maximum(idx, 0)]
        return idx, diff

    def boundary_bumps(self, X, order: int = 0):
        """``eta_j`` and derivatives for the neighbour centers of each point."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx, diff = self.neighbours(X)
        s = np.linalg.norm(diff, axis=2)
        prof = self.profile(s / self.R, order)
        eta = np.where(idx >= 0, prof[0], 0.0)
        out = [idx, eta]
        if order >= 1:
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.where(s[..., None] > 0, diff / s[..., None], 0.0)
            p1 = np.where(idx >= 0, prof[1] / self.R, 0.0)
            out.append(p1[..., None] * u)
            if order >= 2:
                p2 = np.where(idx >= 0, prof[2] / self.R**2, 0.0)
                I = np.eye(self.dim)
                uu = u[..., :, None] * u[..., None, :]
                with np.errstate(divide="ignore", invalid="ignore"):
                    tang = np.where(s > 0, p1 / s, 0.0)
                out.append(p2[..., None, None] * uu + tang[..., None, None] * (I - uu))
        return tuple(out)

    # --- interior bump -------------------------------------------------------

    def interior_bump(self, X, order: int = 0, sdist: Optional[np.ndarray] = None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = self.dim
        if sdist is None:
            sdist = self.atlas.signed_distance(X)
        eta = np.where(sdist > self.R / 16, 1.0, 0.0)
        grad = np.zeros((len(X), n)) if order >= 1 else None
        hess = np.zeros((len(X), n, n)) if order >= 2 else None
        shell = np.flatnonzero((sdist > self.R / 32) & (sdist <= self.R / 16))
        for chunk in np.array_split(shell, max(1, len(shell) // 256 + 1)):
            if len(chunk) == 0:
                continue
            res = self._lattice_sum(X[chunk], order)
            eta[chunk] = res[0]
            if order >= 1:
                grad[chunk] = res[1]
            if order >= 2:
                hess[chunk] = res[2]
        return tuple(v for v in (eta, grad, hess) if v is not None)

    def _lattice_sum(self, X, order):
        n = self.dim
        base = np.round(X / self.h)
        Y = (base[:, None, :] + self._offsets[None]) * self.h
        D = (X[:, None, :] - Y).reshape(-1, n)
        m = 1.0 / self.inner_eps
        w = self._kernel.value(D, m).reshape(len(X), -1)
        live = w > 0
        chi = np.zeros_like(w)
        pts = Y[live]
        chi[live] = (self.atlas.signed_distance(pts) > self.inner_threshold).astype(float)
        S0 = w.sum(axis=1)
        A0 = (w * chi).sum(axis=1)
        eta = A0 / S0
        out = [eta]
        if order >= 1:
            g = self._kernel.gradient(D, m).reshape(len(X), -1, n)
            S1 = g.sum(axis=1)
            A1 = (g * chi[..., None]).sum(axis=1)
            d1 = (A1 - eta[:, None] * S1) / S0[:, None]
            out.append(d1)
            if order >= 2:
                H = self._kernel.hessian(D, m).reshape(len(X), -1, n, n)
                S2 = H.sum(axis=1)
                A2 = (H * chi[..., None, None]).sum(axis=1)
                # eta * S0 = A0 differentiated twice
                d2 = (A2 - eta[:, None, None] * S2
                      - d1[:, :, None] * S1[:, None, :] - S1[:, :, None] * d1[:, None, :]) / S0[:, None, None]
                out.append(d2)
        return out

    # --- normalized partition ------------------------------------------------

    def evaluate(self, X, order: int = 0, sdist: Optional[np.ndarray] = None) -> PartitionValues:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        b = self.boundary_bumps(X, order)
        e0 = self.interior_bump(X, order, sdist)
        idx, eta = b[0], b[1]
        S = eta.sum(axis=1) + e0[0]
        ok = S > 0
        Sx = np.where(ok, S, 1.0)
        xi = np.where(ok[:, None], eta / Sx[:, None], np.nan)
        xi0 = np.where(ok, e0[0] / Sx, np.nan)
        vals = PartitionValues(idx, xi, xi0, S)
        if order >= 1:
            g, g0 = b[2], e0[1]
            gS = g.sum(axis=1) + g0
            vals.dxi = (g - xi[..., None] * gS[:, None, :]) / Sx[:, None, None]
            vals.dxi0 = (g0 - xi0[:, None] * gS) / Sx[:, None]
            if order >= 2:
                H, H0 = b[3], e0[2]
                HS = H.sum(axis=1) + H0

                def second(x, dx, h):
                    # x * S = eta differentiated twice
                    gs = gS[:, None, :] if dx.ndim == 3 else gS
                    hs = HS[:, None] if dx.ndim == 3 else HS
                    Sb = Sx[:, None, None, None] if dx.ndim == 3 else Sx[:, None, None]
                    xb = x[..., None, None]
                    return (h - xb * hs - dx[..., :, None] * gs[..., None, :]
                            - gs[..., :, None] * dx[..., None, :]) / Sb

                vals.d2xi = second(xi, vals.dxi, H)
                vals.d2xi0 = second(xi0, vals.dxi0, H0)
        return vals

    def xi_eval(self, i: int, X) -> np.ndarray:
        """``xi_i`` at points ``X`` (``i = 0`` is the interior bump)."""
        pv = self.evaluate(X)
        if not np.all(pv.in_cover):
            raise GeometryError("point outside the cover W (all bumps vanish)")
        if i == 0:
            return pv.xi0
        return np.where(pv.idx == i - 1, pv.xi, 0.0).sum(axis=1)

    def derivative_report(self, X) -> dict:
        """``sup |grad^k xi_j| * R^k`` over the sample points lying in ``W``, all j."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        sd = self.atlas.signed_distance(X)
        ok = self.atlas.in_cover(X, sd)
        X, sd = X[ok], sd[ok]
        pv = self.evaluate(X, 2, sdist=sd)
        ok = pv.in_cover
        g = max(float(np.max(np.linalg.norm(pv.dxi[ok], axis=-1), initial=0.0)),
                float(np.max(np.linalg.norm(pv.dxi0[ok], axis=-1), initial=0.0)))
        h = max(float(np.max(np.linalg.norm(pv.d2xi[ok], axis=(-2, -1)), initial=0.0)),
                float(np.max(np.linalg.norm(pv.d2xi0[ok], axis=(-2, -1)), initial=0.0)))
        return {"C1": g * self.R, "C2": h * self.R**2}
