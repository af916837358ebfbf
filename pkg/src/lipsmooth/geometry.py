"""Reference frames, Lipschitz graph charts, atlases and the shape library.

Conventions: a frame maps world points by ``z = R (x - x0)``; a chart is a
function on the ball ``|y'| < radius`` of the first ``n-1`` frame coordinates
and the domain lies *below* its graph, i.e. ``z_n < phi(z')`` inside the
cylinder ``|z'| < radius, |z_n| < ell``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import RectBivariateSpline, make_interp_spline
from scipy.spatial import ConvexHull, cKDTree

from .expr import Expression


class GeometryError(ValueError):
    pass


# --- frames and characteristics -----------------------------------------------

@dataclass(frozen=True, eq=False)
class Frame:
    """Isometry ``T x = R (x - base_point)`` with orthogonal ``R``."""

    rotation: np.ndarray
    base_point: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float)
        base = np.array(self.base_point, dtype=float).ravel()
        n = base.size
        if rot.shape != (n, n):
            raise GeometryError(f"rotation must be {n}x{n}, got {rot.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(n))) > 1e-10:
            raise GeometryError("rotation is not orthogonal")
        rot.setflags(write=False)
        base.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "base_point", base)

    @property
    def dim(self) -> int:
        return self.base_point.size

    @property
    def axis(self) -> np.ndarray:
        """World direction of the vertical coordinate, ``R^T e_n``."""
        return self.rotation[-1]

    def forward(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.base_point) @ self.rotation.T

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.rotation + self.base_point


ReferenceFrame = Frame


def frame_from_normal(point: np.ndarray, normal: np.ndarray) -> Frame:
    """Right-handed frame at ``point`` whose vertical axis is ``normal``."""
    nu = np.asarray(normal, dtype=float)
    nu = nu / np.linalg.norm(nu)
    n = nu.size
    if n == 2:
        rot = np.array([[nu[1], -nu[0]], [nu[0], nu[1]]])
    elif n == 3:
        helper = np.eye(3)[int(np.argmin(np.abs(nu)))]
        e1 = helper - (helper @ nu) * nu
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(nu, e1)
        rot = np.array([e1, e2, nu])
    else:
        q, _ = np.linalg.qr(np.column_stack([nu, np.eye(n)[:, : n - 1]]))
        rot = np.roll(q.T, -1, axis=0)
        rot[-1] = nu
        if np.linalg.det(rot) < 0:
            rot[0] *= -1
    return Frame(rot, point)


def rotation_2d(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Characteristic:
    """Lipschitz characteristic ``(L, R)`` plus the diameter of the domain."""

    L: float
    R: float
    diameter: float

    def __post_init__(self):
        if not (self.L > 0):
            raise GeometryError("L must be positive")
        if not (0 < self.R < 1):
            raise GeometryError("R must lie in (0, 1)")
        if not (self.diameter > 0):
            raise GeometryError("diameter must be positive")

    @property
    def ell(self) -> float:
        return self.R * (1 + self.L)


LipschitzCharacteristic = Characteristic


def implicit_graph_derivatives(gz: np.ndarray, Hz: Optional[np.ndarray] = None):
    """Derivatives of the graph ``z_n = psi(z')`` of ``{G = 0}``.

    ``gz`` holds the full gradient of G (last entry the vertical derivative),
    ``Hz`` the full Hessian.  Returns ``(grad psi, hess psi)``.
    """
    Gn = gz[..., -1]
    dpsi = -gz[..., :-1] / Gn[..., None]
    if Hz is None:
        return dpsi, None
    k = gz.shape[-1] - 1
    Hkl = Hz[..., :k, :k]
    Hln = Hz[..., :k, k]
    Hnn = Hz[..., k, k]
    num = (
        Hkl
        + Hln[..., None, :] * dpsi[..., :, None]
        + Hln[..., :, None] * dpsi[..., None, :]
        + Hnn[..., None, None] * dpsi[..., :, None] * dpsi[..., None, :]
    )
    return dpsi, -num / Gn[..., None, None]


# --- chart functions -----------------------------------------------------------

class ChartFunction:
    """Scalar function on ``R^{n-1}`` with first and second derivatives."""

    nvars: int

    def evaluate(self, Y: np.ndarray, order: int = 0):
        raise NotImplementedError


class ExpressionFunction(ChartFunction):
    def __init__(self, expression: Expression):
        self.expression = expression
        self.nvars = expression.nvars

    def evaluate(self, Y, order=0):
        out = [self.expression(Y)]
        if order >= 1:
            out.append(self.expression.gradient(Y))
        if order >= 2:
            out.append(self.expression.hessian(Y))
        return tuple(out)


class GridFunction(ChartFunction):
    """Quintic spline through samples on a uniform grid (1 or 2 variables)."""

    def __init__(self, axes: Sequence[np.ndarray], values: np.ndarray):
        self.nvars = len(axes)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise GeometryError("grid chart has undefined samples")
        if self.nvars == 1:
            self._spline = make_interp_spline(self.axes[0], values, k=5)
            self._d1 = self._spline.derivative(1)
            self._d2 = self._spline.derivative(2)
        elif self.nvars == 2:
            self._spline = RectBivariateSpline(self.axes[0], self.axes[1], values, kx=5, ky=5)
        else:
            raise GeometryError("grid charts support 1 or 2 variables")

    def evaluate(self, Y, order=0):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if self.nvars == 1:
            t = Y[:, 0]
            out = [self._spline(t)]
            if order >= 1:
                out.append(self._d1(t)[:, None])
            if order >= 2:
                out.append(self._d2(t)[:, None, None])
            return tuple(out)
        a, b = Y[:, 0], Y[:, 1]
        s = self._spline
        out = [s.ev(a, b)]
        if order >= 1:
            out.append(np.stack([s.ev(a, b, dx=1), s.ev(a, b, dy=1)], axis=-1))
        if order >= 2:
            hxx, hxy, hyy = s.ev(a, b, dx=2), s.ev(a, b, dx=1, dy=1), s.ev(a, b, dy=2)
            out.append(np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2))
        return tuple(out)


class ExitHeightFunction(ChartFunction):
    """Top of a convex body along the vertical lines of a frame."""

    def __init__(self, body: "ConvexBody", frame: Frame):
        self.body = body
        self.frame = frame
        self.nvars = body.dim - 1

    def evaluate(self, Y, order=0):
        return self.body.exit_height(self.frame.rotation, self.frame.base_point, Y, order)


@dataclass(eq=False)
class Chart:
    """Lipschitz graph chart: a frame, a radius and a function on ``B'_radius``."""

    frame: Frame
    radius: float
    lipschitz: float
    fn: ChartFunction

    @property
    def dim(self) -> int:
        return self.frame.dim

    @property
    def ell(self) -> float:
        return self.radius * (1 + self.lipschitz)

    def evaluate(self, Y, order=0):
        Y = np.asarray(Y, dtype=float).reshape(-1, self.dim - 1)
        return self.fn.evaluate(Y, order)

    def value(self, Y):
        return self.evaluate(Y, 0)[0]

    def gradient(self, Y):
        return self.evaluate(Y, 1)[1]

    def hessian(self, Y):
        return self.evaluate(Y, 2)[2]

    def graph(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float).reshape(-1, self.dim - 1)
        return self.frame.inverse(np.column_stack([Y, self.value(Y)]))

    def in_cylinder(self, X, shrink: float = 1.0) -> np.ndarray:
        Z = self.frame.forward(X)
        return (np.linalg.norm(Z[:, :-1], axis=1) < shrink * self.radius) & (
            np.abs(Z[:, -1]) < self.ell
        )


LipschitzChart = Chart


def ball_grid(radius: float, k: int, res: int) -> np.ndarray:
    """Uniform grid points of the closed ``k``-ball, ``res`` nodes per axis."""
    ax = np.linspace(-radius, radius, res)
    if k == 1:
        return ax[:, None]
    mesh = np.stack(np.meshgrid(*([ax] * k), indexing="ij"), axis=-1).reshape(-1, k)
    return mesh[np.linalg.norm(mesh, axis=1) <= radius * (1 + 1e-12)]


def point_diameter(points) -> float:
    """Largest distance between two points, searched over the convex hull vertices."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if len(P) < 2:
        return 0.0
    try:
        P = P[ConvexHull(P).vertices]
    except Exception:  # degenerate (flat) point sets
        pass
    best = 0.0
    for s in range(0, len(P), 512):
        best = max(best, float(np.max(np.linalg.norm(P[s:s + 512, None, :] - P[None], axis=-1))))
    return best


def chart_lipschitz(chart: Chart, res: int = 201, radius: Optional[float] = None) -> float:
    """Sampled sup of ``|grad phi|`` over the chart ball."""
    Y = ball_grid(chart.radius if radius is None else radius, chart.dim - 1, res)
    g = chart.gradient(Y)
    return float(np.max(np.linalg.norm(g, axis=1)))


# --- convex primitives -------------------------------------------------------

class HalfSpace:
    """``a . x <= b`` with unit outward normal ``a``."""

    def __init__(self, normal, offset):
        a = np.asarray(normal, dtype=float)
        nrm = np.linalg.norm(a)
        self.a = a / nrm
        self.b = float(offset) / nrm

    def level(self, X):
        return X @ self.a - self.b

    def grad(self, X):
        return np.broadcast_to(self.a, X.shape).copy()

    def hess(self, X):
        return np.zeros(X.shape + (X.shape[-1],))

    def depth(self, X):
        return self.b - X @ self.a

    def line_top(self, O, U):
        au = U @ self.a
        num = self.b - O @ self.a
        au = np.broadcast_to(au, num.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / au
        flat = np.abs(au) <= 1e-14
        t = np.where(au < -1e-14, np.inf, t)
        return np.where(flat, np.where(num >= 0, np.inf, np.nan), t)


class Ball:
    def __init__(self, center, radius):
        self.c = np.asarray(center, dtype=float)
        self.r = float(radius)

    def level(self, X):
        return np.sum((X - self.c) ** 2, axis=-1) - self.r**2

    def grad(self, X):
        return 2.0 * (X - self.c)

    def hess(self, X):
        n = X.shape[-1]
        return np.broadcast_to(2.0 * np.eye(n), X.shape + (n,)).copy()

    def depth(self, X):
        return self.r - np.linalg.norm(X - self.c, axis=-1)

    def line_top(self, O, U):
        w = O - self.c
        wu = np.sum(w * U, axis=-1)
        disc = wu**2 - (np.sum(w * w, axis=-1) - self.r**2)
        with np.errstate(invalid="ignore"):
            return np.where(disc >= 0, -wu + np.sqrt(disc), np.nan)


class SolidCylinder:
    """Infinite solid circular cylinder with unit axis ``axis``."""

    def __init__(self, center, axis, radius):
        self.c = np.asarray(center, dtype=float)
        u = np.asarray(axis, dtype=float)
        self.u = u / np.linalg.norm(u)
        self.r = float(radius)

    def _perp(self, V):
        return V - np.einsum("...i,i->...", V, self.u)[..., None] * self.u

    def level(self, X):
        return np.sum(self._perp(X - self.c) ** 2, axis=-1) - self.r**2

    def grad(self, X):
        return 2.0 * self._perp(X - self.c)

    def hess(self, X):
        n = X.shape[-1]
        P = np.eye(n) - np.outer(self.u, self.u)
        return np.broadcast_to(2.0 * P, X.shape + (n,)).copy()

    def depth(self, X):
        return self.r - np.linalg.norm(self._perp(X - self.c), axis=-1)

    def line_top(self, O, U):
        wp = self._perp(O - self.c)
        Up = self._perp(np.broadcast_to(U, O.shape))
        A = np.sum(Up * Up, axis=-1)
        B = 2.0 * np.sum(wp * Up, axis=-1)
        C = np.sum(wp * wp, axis=-1) - self.r**2
        disc = B * B - 4 * A * C
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (-B + np.sqrt(disc)) / (2 * A)
        t = np.where(disc >= 0, t, np.nan)
        return np.where(A <= 1e-14, np.where(C < 0, np.inf, np.nan), t)


# --- bodies ------------------------------------------------------------------

@dataclass
class BoundarySample:
    points: np.ndarray
    normals: np.ndarray
    labels: np.ndarray
    spacing: float

    def label_trees(self) -> dict:
        """One KD-tree per label, with the indices of its points."""
        cache = self.__dict__.get("_label_trees")
        if cache is None:
            cache = {}
            for lab in np.unique(self.labels):
                idx = np.flatnonzero(self.labels == lab)
                cache[int(lab)] = (cKDTree(self.points[idx]), idx)
            self.__dict__["_label_trees"] = cache
        return cache


class Body:
    """Bounded domain with membership, distance and boundary sampling."""

    dim: int
    name: str
    diameter: float

    def contains(self, X) -> np.ndarray:
        raise NotImplementedError

    def sample_boundary(self, spacing: float) -> BoundarySample:
        raise NotImplementedError

    def signed_distance(self, X, tree: Optional[cKDTree] = None) -> np.ndarray:
        """Distance to the boundary, positive inside (sample based by default)."""
        if tree is None:
            raise GeometryError("a boundary sample tree is required")
        d, _ = tree.query(X)
        return np.where(self.contains(X), d, -d)

    def make_chart(self, point, R: float, L: float) -> Chart:
        raise GeometryError(f"{self.name}: charts must be supplied explicitly")


class ConvexBody(Body):
    """Intersection of half-spaces, balls and solid cylinders."""

    def __init__(self, dim, primitives, center, diameter, name="convex"):
        self.dim = dim
        self.primitives = list(primitives)
        self.center = np.asarray(center, dtype=float)
        self.diameter = float(diameter)
        self.name = name
        self._sample: Optional[BoundarySample] = None
        self._tree: Optional[cKDTree] = None

    def levels(self, X):
        return np.stack([p.level(X) for p in self.primitives])

    def contains(self, X):
        X = np.atleast_2d(X)
        return np.all(self.levels(X) < 0, axis=0)

    def signed_distance(self, X, tree=None):
        X = np.atleast_2d(X)
        depth = np.min(np.stack([p.depth(X) for p in self.primitives]), axis=0)
        inside = depth > 0
        if np.all(inside):
            return depth
        out = depth.copy()
        if tree is None:
            tree = self.boundary_tree()
        d, _ = tree.query(X[~inside])
        out[~inside] = -d
        return out

    def exit_height(self, rot, origin, Y, order=0):
        """Chart values of the body in frames ``rot`` (one per point or shared)."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        k = self.dim - 1
        if rot.ndim == 2:
            O = Y @ rot[:k] + origin
            U = np.broadcast_to(rot[-1], O.shape)
            rot = np.broadcast_to(rot, (Y.shape[0],) + rot.shape)
        else:
            O = np.einsum("pk,pkj->pj", Y, rot[:, :k, :]) + origin
            U = rot[:, -1, :]
        tops = np.stack([p.line_top(O, U) for p in self.primitives])
        act = np.argmin(np.where(np.isnan(tops), -np.inf, tops), axis=0)
        t = tops[act, np.arange(Y.shape[0])]
        t = np.where(np.isfinite(t), t, np.nan)
        out = [t]
        if order >= 1:
            X = O + t[:, None] * U
            gw = np.zeros_like(X)
            Hw = np.zeros(X.shape + (self.dim,)) if order >= 2 else None
            for i, prim in enumerate(self.primitives):
                sel = act == i
                if np.any(sel):
                    gw[sel] = prim.grad(X[sel])
                    if Hw is not None:
                        Hw[sel] = prim.hess(X[sel])
            gz = np.einsum("pij,pj->pi", rot, gw)
            Hz = None if Hw is None else np.einsum("pia,pab,pjb->pij", rot, Hw, rot)
            dphi, hphi = implicit_graph_derivatives(gz, Hz)
            out.append(dphi)
            if order >= 2:
                out.append(hphi)
        return tuple(out)

    def line_exit(self, O, U):
        """Largest parameter ``t`` with ``O + t U`` in the closed body (NaN if missed)."""
        t = self.primitives[0].line_top(O, U)
        for p in self.primitives[1:]:
            t = np.minimum(t, p.line_top(O, U))
        return np.where(np.isfinite(t), t, np.nan)

    def _ray_exit(self, dirs):
        O = np.broadcast_to(self.center, dirs.shape)
        tops = np.stack([p.line_top(O, dirs) for p in self.primitives])
        act = np.argmin(np.where(np.isnan(tops), np.inf, tops), axis=0)
        s = tops[act, np.arange(dirs.shape[0])]
        return O + s[:, None] * dirs, act

    def _directions(self, count):
        if self.dim == 2:
            th = 2 * np.pi * np.arange(count) / count
            return np.column_stack([np.cos(th), np.sin(th)])
        i = np.arange(count) + 0.5
        z = 1 - 2 * i / count
        phi = np.pi * (1 + 5**0.5) * i
        r = np.sqrt(1 - z * z)
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])

    def sample_boundary(self, spacing):
        rad = self.diameter / 2
        if self.dim == 2:
            count = int(math.ceil(2 * np.pi * rad / spacing))
        else:
            count = int(math.ceil(4 * np.pi * rad**2 / spacing**2))
        for _ in range(12):
            P, act = self._ray_exit(self._directions(count))
            if self.dim == 2:
                gap = np.max(np.linalg.norm(P - np.roll(P, 1, axis=0), axis=1))
            else:
                gap = np.max(cKDTree(P).query(P, k=2)[0][:, 1])
            if gap <= spacing:
                break
            count = int(count * (gap / spacing) ** (self.dim - 1) * 1.1) + 1
        normals = np.zeros_like(P)
        for i, prim in enumerate(self.primitives):
            sel = act == i
            if np.any(sel):
                g = prim.grad(P[sel])
                normals[sel] = g / np.linalg.norm(g, axis=1, keepdims=True)
        return BoundarySample(P, normals, act, spacing)

    def boundary_tree(self):
        if self._tree is None:
            self._sample = self.sample_boundary(self.diameter / 2000)
            self._tree = cKDTree(self._sample.points)
        return self._tree

    def outward_normal(self, X, label):
        g = self.primitives[label].grad(np.atleast_2d(X))[0]
        return g / np.linalg.norm(g)

    def make_chart(self, point, R, L, sample: Optional[BoundarySample] = None,
                   tree: Optional[cKDTree] = None, zone: float = 1.1):
        """Chart at a boundary point, tilted to bisect nearby faces."""
        point = np.asarray(point, dtype=float)
        depth = np.array([p.depth(point[None])[0] for p in self.primitives])
        own = int(np.argmin(np.abs(depth)))
        axis = self.outward_normal(point, own)
        if sample is not None:
            for lab, (ltree, lidx) in sorted(sample.label_trees().items()):
                if lab == own:
                    continue
                d, j = ltree.query(point)
                if d <= zone * R:
                    axis = axis + self.outward_normal(sample.points[lidx[j]], lab)
        frame = frame_from_normal(point, axis)
        return Chart(frame, R, L, ExitHeightFunction(self, frame))


class StarBody(Body):
    """Planar star domain ``|x - c| < r0 (1 + a cos(k theta))``."""

    def __init__(self, radius=1.0, amplitude=0.1, lobes=5, center=(0.0, 0.0)):
        if not (radius > 0) or not (0 <= amplitude < 1) or int(lobes) < 1:
            raise GeometryError("invalid star parameters")
        self.dim = 2
        self.name = "star"
        self.r0 = float(radius)
        self.a = float(amplitude)
        self.k = int(lobes)
        self.center = np.asarray(center, dtype=float)
        self.diameter = 2 * self.r0 * (1 + self.a)

    def radial(self, th, order=0):
        r = self.r0 * (1 + self.a * np.cos(self.k * th))
        if order == 0:
            return r
        return r, -self.r0 * self.a * self.k * np.sin(self.k * th)

    def level(self, X):
        W = np.atleast_2d(X) - self.center
        return np.linalg.norm(W, axis=1) - self.radial(np.arctan2(W[:, 1], W[:, 0]))

    def contains(self, X):
        return self.level(X) < 0

    def sample_boundary(self, spacing):
        count = int(math.ceil(2 * np.pi * self.r0 * (1 + self.a * (1 + self.k)) / spacing))
        th = 2 * np.pi * np.arange(count) / count
        r, dr = self.radial(th, 1)
        er = np.column_stack([np.cos(th), np.sin(th)])
        et = np.column_stack([-np.sin(th), np.cos(th)])
        P = self.center + r[:, None] * er
        nrm = er - (dr / r)[:, None] * et
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return BoundarySample(P, nrm, np.zeros(count, dtype=int), spacing)

    def make_chart(self, point, R, L, sample=None, tree=None, res=1025):
        W = np.asarray(point, dtype=float) - self.center
        th = math.atan2(W[1], W[0])
        r, dr = self.radial(np.array([th]), 1)
        er = np.array([math.cos(th), math.sin(th)])
        et = np.array([-math.sin(th), math.cos(th)])
        frame = frame_from_normal(point, er - (dr[0] / r[0]) * et)
        return regraph_level(self.level, frame, R, L, R * (1 + L), res)


class ChartUnionBody(Body):
    """Domain known only through an explicit list of charts."""

    def __init__(self, charts: Sequence[Chart], name="charts"):
        self.charts = list(charts)
        self.dim = self.charts[0].dim
        self.name = name
        sample = self.sample_boundary(min(c.radius for c in self.charts) / 64)
        self.diameter = point_diameter(sample.points)
        self._build_fill(sample.points)

    def _cylinder_sign(self, X):
        """+1 above / -1 below the graph inside some cylinder, 0 elsewhere."""
        sign = np.zeros(len(X))
        for ch in self.charts:
            Z = ch.frame.forward(X)
            inc = (np.linalg.norm(Z[:, :-1], axis=1) < ch.radius) & (np.abs(Z[:, -1]) < ch.ell) & (sign == 0)
            if np.any(inc):
                below = Z[inc, -1] < ch.value(Z[inc, :-1])
                sign[np.flatnonzero(inc)] = np.where(below, -1.0, 1.0)
        return sign

    def _build_fill(self, pts):
        h = min(c.radius for c in self.charts) / 4
        lo = pts.min(axis=0) - 2 * h
        hi = pts.max(axis=0) + 2 * h
        shape = tuple(np.ceil((hi - lo) / h).astype(int) + 1)
        axes = [lo[i] + h * np.arange(shape[i]) for i in range(self.dim)]
        G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        sign = self._cylinder_sign(G).reshape(shape)
        border = np.ones(shape, dtype=bool)
        border[tuple(slice(1, -1) for _ in shape)] = False
        sign[border & (sign == 0)] = 1.0
        lab, count = ndimage.label(sign == 0)
        for c in range(1, count + 1):
            comp = lab == c
            ring = ndimage.binary_dilation(comp) & ~comp
            vals = sign[ring]
            sign[comp] = -1.0 if np.sum(vals < 0) > np.sum(vals > 0) else 1.0
        self._lo, self._h, self._fill = lo, h, sign

    def contains(self, X):
        X = np.atleast_2d(X)
        sign = self._cylinder_sign(X)
        rest = sign == 0
        if np.any(rest):
            idx = np.rint((X[rest] - self._lo) / self._h).astype(int)
            ok = np.all((idx >= 0) & (idx < np.array(self._fill.shape)), axis=1)
            vals = np.ones(len(idx))
            vals[ok] = self._fill[tuple(idx[ok].T)]
            sign[rest] = vals
        return sign < 0

    def sample_boundary(self, spacing):
        pts, nrm = [], []
        for ch in self.charts:
            res = max(3, int(math.ceil(2 * ch.radius / spacing)) + 1)
            Y = ball_grid(ch.radius, self.dim - 1, res)
            v, g = ch.evaluate(Y, 1)
            pts.append(ch.frame.inverse(np.column_stack([Y, v])))
            nz = np.column_stack([-g, np.ones(len(Y))])
            nz /= np.linalg.norm(nz, axis=1, keepdims=True)
            nrm.append(nz @ ch.frame.rotation)
        P = np.concatenate(pts)
        return BoundarySample(P, np.concatenate(nrm), np.zeros(len(P), dtype=int), spacing)


# --- regraphing, transversality and transition maps ----------------------------

def transversality_margin(chart: Chart, direction, res: int = 201) -> float:
    """Min of ``direction . nu`` over grid samples of the chart's graph.

    ``direction`` is expressed in the chart's own frame coordinates.
    """
    nvec = np.asarray(direction, dtype=float)
    nn = np.linalg.norm(nvec)
    if nn == 0:
        raise GeometryError("zero-length direction")
    if res < 3:
        raise GeometryError("grid too coarse to form gradients")
    nvec = nvec / nn
    Y = ball_grid(chart.radius, chart.dim - 1, res)
    g = chart.gradient(Y)
    nu = np.column_stack([-g, np.ones(len(Y))])
    nu /= np.linalg.norm(nu, axis=1, keepdims=True)
    return float(np.min(nu @ nvec))


def _bisect_vertical(level, frame, Y, lo, hi, iters=60):
    """Root of ``level(frame^{-1}(y', t))`` in ``t`` on ``[lo, hi]``, vectorized."""
    P = len(Y)
    a = np.full(P, lo, dtype=float)
    b = np.full(P, hi, dtype=float)

    def f(t):
        return level(frame.inverse(np.column_stack([Y, t])))

    fa, fb = f(a), f(b)
    bad = ~((fa < 0) & (fb > 0))
    if np.any(bad):
        raise GeometryError("window exits the source cylinder (no sign change on vertical)")
    for _ in range(iters):
        c = 0.5 * (a + b)
        fc = f(c)
        neg = fc < 0
        a = np.where(neg, c, a)
        b = np.where(neg, b, c)
    return 0.5 * (a + b)


def regraph_level(level, frame: Frame, radius: float, L: float, ell: float, res: int = 1025) -> Chart:
    """Chart in ``frame`` of the zero set of a world ``level`` function."""
    k = frame.dim - 1
    ax = np.linspace(-radius, radius, res if k == 1 else min(res, 129))
    if k == 1:
        vals = _bisect_vertical(level, frame, ax[:, None], -ell, ell)
        fn = GridFunction([ax], vals)
    else:
        mesh = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
        vals = _bisect_vertical(level, frame, mesh, -ell, ell).reshape(len(ax), len(ax))
        fn = GridFunction([ax, ax], vals)
    return Chart(frame, radius, L, fn)


def chart_level(chart: Chart):
    """World function ``z_n - phi(z')`` of a chart (negative inside)."""

    def level(X):
        Z = chart.frame.forward(X)
        return Z[:, -1] - chart.value(Z[:, :-1])

    return level


def regraph(chart: Chart, frame: Frame, window: float, res: int = 1025) -> Chart:
    """Re-express the graph of ``chart`` as a graph over the vertical of ``frame``."""
    axis_local = chart.frame.rotation @ frame.axis
    kappa = transversality_margin(chart, axis_local)
    if kappa <= 0:
        raise GeometryError("graph is not transversal to the target vertical")
    Lnew = math.sqrt(max(1 - kappa**2, 0.0)) / kappa
    return regraph_level(chart_level(chart), frame, window, Lnew, chart.ell, res)


def transition_eval(atlas: "Atlas", i: int, j: int, Y) -> np.ndarray:
    """``C^{i,j} y' = Pi T^j (T^i)^{-1} (y', phi^i(y'))``."""
    Y = np.asarray(Y, dtype=float).reshape(-1, atlas.dim - 1)
    if i == j:
        return Y.copy()
    ci, cj = atlas.charts[i], atlas.charts[j]
    if np.any(np.linalg.norm(Y, axis=1) >= ci.radius):
        raise GeometryError("point outside the source chart ball")
    Z = cj.frame.forward(ci.graph(Y))
    if np.any(np.linalg.norm(Z[:, :-1], axis=1) >= cj.radius) or np.any(np.abs(Z[:, -1]) >= cj.ell):
        raise GeometryError("mapped point exits the target cylinder")
    return Z[:, :-1]


@dataclass
class TransitionMap:
    atlas: "Atlas"
    source: int
    target: int

    def forward(self, Y):
        return transition_eval(self.atlas, self.source, self.target, Y)

    def inverse(self, Y):
        return transition_eval(self.atlas, self.target, self.source, Y)

    def domain_samples(self, res: int = 201) -> np.ndarray:
        """Grid points of the source window whose graph lies in the target cylinder."""
        ci = self.atlas.charts[self.source]
        Y = ball_grid(self.atlas.window, self.atlas.dim - 1, res)
        X = ci.graph(Y)
        cj = self.atlas.charts[self.target]
        Z = cj.frame.forward(X)
        ok = (np.linalg.norm(Z[:, :-1], axis=1) < self.atlas.window) & (np.abs(Z[:, -1]) < cj.ell)
        return Y[ok]

    def lipschitz(self, res: int = 201):
        """Sampled difference-quotient bounds of the map and its inverse."""
        Y = self.domain_samples(res)
        if len(Y) < 2:
            return 0.0, 0.0
        F = self.forward(Y)
        tree = cKDTree(Y)
        pairs = tree.query_pairs(3 * self.atlas.window * 2 / (res - 1), output_type="ndarray")
        dy = np.linalg.norm(Y[pairs[:, 0]] - Y[pairs[:, 1]], axis=1)
        df = np.linalg.norm(F[pairs[:, 0]] - F[pairs[:, 1]], axis=1)
        return float(np.max(df / dy)), float(np.max(dy / df))


# --- atlas --------------------------------------------------------------------

def farthest_point_centers(points: np.ndarray, radius: float) -> np.ndarray:
    """Greedy farthest-point subset whose covering radius is at most ``radius``.

    Distances are updated only inside the ball of the current maximum, which
    is the only place a new center can lower them.
    """
    tree = cKDTree(points)
    start = int(np.lexsort(points.T[::-1])[0])
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    while True:
        far = int(np.argmax(dist))
        dmax = dist[far]
        if dmax <= radius:
            break
        chosen.append(far)
        near = np.asarray(tree.query_ball_point(points[far], dmax), dtype=int)
        d = np.sqrt(np.sum((points[near] - points[far]) ** 2, axis=1))
        dist[near] = np.minimum(dist[near], d)
    return np.array(chosen)


@dataclass(eq=False)
class Atlas:
    """Charts at boundary centers together with the Lipschitz characteristic."""

    body: Body
    characteristic: Characteristic
    charts: list
    centers: np.ndarray
    eps0: float
    sample: BoundarySample
    name: str = "domain"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        R = self.characteristic.R
        if not (0 < self.eps0 < R / 4):
            raise GeometryError("eps0 must lie in (0, R/4)")
        self.rotations = np.stack([c.frame.rotation for c in self.charts])
        self.origins = np.stack([c.frame.base_point for c in self.charts])
        self.center_tree = cKDTree(self.centers)
        self.sample_tree = cKDTree(self.sample.points)
        body = self.body
        self._batch = isinstance(body, ConvexBody) and all(
            isinstance(c.fn, ExitHeightFunction) and c.fn.body is body for c in self.charts
        )

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def L(self) -> float:
        return self.characteristic.L

    @property
    def R(self) -> float:
        return self.characteristic.R

    @property
    def ell(self) -> float:
        return self.characteristic.ell

    @property
    def window(self) -> float:
        """Radius of the chart windows ``B'_{R - 2 eps0}``."""
        return self.R - 2 * self.eps0

    def __len__(self):
        return len(self.charts)

    def eval_charts(self, ids: np.ndarray, Y: np.ndarray, order: int = 0):
        """Evaluate chart ``ids[p]`` at ``Y[p]`` for every p."""
        ids = np.asarray(ids)
        Y = np.asarray(Y, dtype=float).reshape(len(ids), -1)
        if self._batch:
            return self.body.exit_height(self.rotations[ids], self.origins[ids], Y, order)
        k = self.dim - 1
        out = [np.empty(len(ids))]
        if order >= 1:
            out.append(np.empty((len(ids), k)))
        if order >= 2:
            out.append(np.empty((len(ids), k, k)))
        for c in np.unique(ids):
            sel = ids == c
            res = self.charts[c].evaluate(Y[sel], order)
            for o in range(order + 1):
                out[o][sel] = res[o]
        return tuple(out)

    def eval_translates(self, ids: np.ndarray, Y: np.ndarray, S: np.ndarray,
                        clip: Optional[float] = None) -> np.ndarray:
        """Values of chart ``ids[p]`` at ``Y[p] - S[q]``, shape ``(P, Q)``.

        With ``clip`` the argument is first projected onto the closed ball of
        that radius, which extends each chart to an ``L``-Lipschitz function on
        all of ``R^{n-1}``.
        """
        ids = np.asarray(ids)
        Y = np.asarray(Y, dtype=float).reshape(len(ids), -1)
        k = Y.shape[1]
        Z = None
        if clip is not None:
            Z = Y[:, None, :] - S[None]
            nrm = np.linalg.norm(Z, axis=2, keepdims=True)
            Z = Z * np.minimum(1.0, clip / np.maximum(nrm, 1e-300))
        if self._batch:
            rot = self.rotations[ids]
            T = rot[:, :k, :]
            if Z is None:
                base = self.origins[ids] + np.einsum("pk,pkj->pj", Y, T)
                O = base[:, None, :] - np.einsum("qk,pkj->pqj", S, T)
            else:
                O = self.origins[ids][:, None, :] + np.einsum("pqk,pkj->pqj", Z, T)
            return self.body.line_exit(O, rot[:, None, k, :])
        pts = (Y[:, None, :] - S[None] if Z is None else Z).reshape(-1, k)
        return self.eval_charts(np.repeat(ids, len(S)), pts)[0].reshape(len(ids), len(S))

    def signed_distance(self, X) -> np.ndarray:
        return self.body.signed_distance(np.atleast_2d(X), self.sample_tree)

    def contains(self, X) -> np.ndarray:
        return self.body.contains(np.atleast_2d(X))

    def in_cover(self, X, sdist=None) -> np.ndarray:
        """Membership in ``W = U B_{R/8}(x^i)  U  Omega_{R/32}``."""
        X = np.atleast_2d(X)
        d, _ = self.center_tree.query(X)
        if sdist is None:
            sdist = self.signed_distance(X)
        return (d < self.R / 8) | (sdist > self.R / 32)

    def cardinality_bound(self, c: float = 64.0) -> float:
        ch = self.characteristic
        return c * (ch.diameter / ch.R) ** self.dim

    def covering_radius(self) -> float:
        d, _ = self.center_tree.query(self.sample.points)
        return float(np.max(d))

    def bounding_box(self, pad: float = 0.0):
        return self.sample.points.min(axis=0) - pad, self.sample.points.max(axis=0) + pad


def build_atlas(body: Body, L: float, R: float, eps0: Optional[float] = None,
                spacing: Optional[float] = None, name: Optional[str] = None,
                check_lipschitz: bool = True, params: Optional[dict] = None) -> Atlas:
    """Greedy centers and one chart per center.

    The covering radius is R/16 in the plane and R/10 in space; both leave a
    margin to R/8 larger than the gap between boundary samples.
    """
    ch = Characteristic(L, R, body.diameter)
    if spacing is None:
        spacing = R / 256 if body.dim == 2 else R / 40
    sample = body.sample_boundary(spacing)
    tree = cKDTree(sample.points)
    idx = farthest_point_centers(sample.points, R / 16 if body.dim == 2 else R / 10)
    centers = sample.points[idx]
    charts = [body.make_chart(x, R, L, sample=sample, tree=tree) for x in centers]
    atlas = Atlas(body, ch, charts, centers, R / 8 if eps0 is None else eps0, sample,
                  name=name or body.name, params=params or {})
    if check_lipschitz:
        check_atlas_lipschitz(atlas)
    return atlas


def check_atlas_lipschitz(atlas: Atlas, res: Optional[int] = None):
    """Raise if a chart is undefined on its ball or steeper than L."""
    k = atlas.dim - 1
    res = res or (401 if k == 1 else 41)
    Y = ball_grid(atlas.R, k, res)
    worst = 0.0
    step = max(1, 200000 // len(Y))
    for c0 in range(0, len(atlas), step):
        cs = np.arange(c0, min(c0 + step, len(atlas)))
        ids = np.repeat(cs, len(Y))
        v, g = atlas.eval_charts(ids, np.tile(Y, (len(cs), 1)), 1)
        bad = ~np.isfinite(v) | (np.abs(v) >= atlas.ell)
        if np.any(bad):
            c = int(ids[np.argmax(bad)])
            raise GeometryError(f"chart {c} leaves its cylinder: shape violates Lipschitz graphicality")
        worst = max(worst, float(np.max(np.linalg.norm(g, axis=1))))
    if worst > atlas.L * (1 + 1e-9):
        raise GeometryError(
            f"measured chart slope {worst:.6g} exceeds L = {atlas.L:.6g}: "
            "shape violates Lipschitz graphicality"
        )
    return worst


def validate_graph_condition(atlas: Atlas, chart_ids=None, samples: int = 2000, seed: int = 0) -> int:
    """Count cylinder points where membership disagrees with the subgraph test."""
    rng = np.random.default_rng(seed)
    k = atlas.dim - 1
    bad = 0
    ids = range(len(atlas)) if chart_ids is None else chart_ids
    for c in ids:
        ch = atlas.charts[c]
        Yd = rng.normal(size=(samples, k))
        Yd *= (ch.radius * rng.uniform(size=(samples, 1)) ** (1 / k)) / np.linalg.norm(Yd, axis=1, keepdims=True)
        zn = rng.uniform(-ch.ell, ch.ell, size=samples)
        Z = np.column_stack([Yd, zn])
        phi = ch.value(Yd)
        far = np.abs(zn - phi) > 1e-9
        inside = atlas.contains(ch.frame.inverse(Z))
        bad += int(np.sum((inside != (zn < phi)) & far))
    return bad


# --- shape library -------------------------------------------------------------

SHAPES = ("disk", "square", "regular_polygon", "star", "cube", "sphere", "cylinder")


def _polygon(k: int, circumradius: float, rotation: float = 0.0):
    prims = []
    apothem = circumradius * math.cos(math.pi / k)
    for i in range(k):
        th = rotation + 2 * math.pi * (i + 0.5) / k
        prims.append(HalfSpace([math.cos(th), math.sin(th)], apothem))
    return prims


def make_shape(name: str, **params) -> Atlas:
    """Atlas of a library shape with its analytic Lipschitz characteristic."""
    p = dict(params)
    eps0 = p.pop("eps0", None)
    if name == "disk":
        rad = float(p.pop("radius", 1.0))
        L = float(p.pop("L", 0.2))
        center = np.asarray(p.pop("center", (0.0, 0.0)), dtype=float)
        _no_extra(name, p)
        if rad <= 0 or L <= 0:
            raise GeometryError("disk radius and L must be positive")
        R = min(rad * L / math.sqrt(1 + L * L), 0.95)
        body = ConvexBody(2, [Ball(center, rad)], center, 2 * rad, "disk")
        return build_atlas(body, L, R, eps0, params=dict(radius=rad, L=L))
    if name == "sphere":
        rad = float(p.pop("radius", 1.0))
        L = float(p.pop("L", 1.0))
        _no_extra(name, p)
        if rad <= 0 or L <= 0:
            raise GeometryError("sphere radius and L must be positive")
        R = min(rad * L / math.sqrt(1 + L * L), 0.95)
        body = ConvexBody(3, [Ball(np.zeros(3), rad)], np.zeros(3), 2 * rad, "sphere")
        return build_atlas(body, L, R, eps0, params=dict(radius=rad, L=L))
    if name in ("square", "regular_polygon"):
        if name == "square":
            side = float(p.pop("side", 2.0))
            k = 4
            circ = side / math.sqrt(2)
        else:
            k = int(p.pop("vertices", 6))
            circ = float(p.pop("circumradius", 1.0))
        R = float(p.pop("R", 0.5 if name == "square" else 0.3))
        _no_extra(name, p)
        if k < 3 or circ <= 0:
            raise GeometryError("polygon needs at least 3 vertices and positive size")
        L = math.tan(math.pi / k)
        body = ConvexBody(2, _polygon(k, circ, -math.pi / 4 if k == 4 else 0.0),
                          np.zeros(2), 2 * circ, name)
        return build_atlas(body, L, R, eps0, params=dict(vertices=k, circumradius=circ, R=R))
    if name == "cube":
        side = float(p.pop("side", 2.0))
        R = float(p.pop("R", 0.5))
        _no_extra(name, p)
        h = side / 2
        prims = [HalfSpace(s * np.eye(3)[i], h) for i in range(3) for s in (1.0, -1.0)]
        body = ConvexBody(3, prims, np.zeros(3), side * math.sqrt(3), "cube")
        return build_atlas(body, math.sqrt(2), R, eps0, params=dict(side=side, R=R))
    if name == "cylinder":
        rad = float(p.pop("radius", 1.0))
        hh = float(p.pop("half_height", 1.0))
        R = float(p.pop("R", 0.3))
        L = float(p.pop("L", 1.5))
        _no_extra(name, p)
        prims = [SolidCylinder(np.zeros(3), [0, 0, 1], rad),
                 HalfSpace([0, 0, 1], hh), HalfSpace([0, 0, -1], hh)]
        body = ConvexBody(3, prims, np.zeros(3), 2 * math.hypot(rad, hh), "cylinder")
        return build_atlas(body, L, R, eps0, params=dict(radius=rad, half_height=hh, R=R, L=L))
    if name == "star":
        body = StarBody(float(p.pop("radius", 1.0)), float(p.pop("amplitude", 0.1)),
                        int(p.pop("lobes", 5)))
        R = float(p.pop("R", 0.15))
        L = float(p.pop("L", 0.5))
        _no_extra(name, p)
        return build_atlas(body, L, R, eps0,
                           params=dict(radius=body.r0, amplitude=body.a, lobes=body.k, R=R, L=L))
    raise GeometryError(f"unknown shape id {name!r} (expected one of {', '.join(SHAPES)})")


def _no_extra(name, p):
    if p:
        raise GeometryError(f"unknown parameter(s) for {name}: {', '.join(sorted(p))}")
