"""Mollifier kernel, chart mollification and the slab constructions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.optimize import minimize, minimize_scalar

from .geometry import Chart, GeometryError, ball_grid

RADIAL_NODES = 64
ANGULAR_NODES = 16
PANEL_NODES = 64


def bump(r2: np.ndarray) -> np.ndarray:
    """Unnormalized ``exp(-1/(1-|x|^2))`` as a function of ``|x|^2``."""
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    ins = r2 < 1
    out[ins] = np.exp(-1.0 / (1.0 - r2[ins]))
    return out


@lru_cache(maxsize=None)
def kernel_constant(dim: int) -> float:
    """``c`` with ``c * int_{B_1} exp(-1/(1-|x|^2)) dx = 1`` in ``R^dim``."""
    sphere = 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)
    f = lambda r: r ** (dim - 1) * math.exp(-1.0 / (1.0 - r * r)) if r < 1 else 0.0
    val = quad(f, 0.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)[0]
    return 1.0 / (sphere * val)


@dataclass(frozen=True)
class Kernel:
    """Normalized mollifier on ``R^dim`` with closed-form derivatives."""

    dim: int

    @property
    def constant(self) -> float:
        return kernel_constant(self.dim)

    def value(self, X, m: float = 1.0):
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        S = m * X
        return self.constant * m**self.dim * bump(np.sum(S * S, axis=1))

    def gradient(self, X, m: float = 1.0):
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        S = m * X
        r2 = np.sum(S * S, axis=1)
        rho = bump(r2)
        u = np.where(r2 < 1, 1 - r2, 1.0)
        g = (-2.0 * rho / u**2)[:, None] * S
        return self.constant * m ** (self.dim + 1) * g

    def hessian(self, X, m: float = 1.0):
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        S = m * X
        r2 = np.sum(S * S, axis=1)
        rho = bump(r2)
        u = np.where(r2 < 1, 1 - r2, 1.0)
        I = np.eye(self.dim)
        ss = S[:, :, None] * S[:, None, :]
        H = (-2.0 * rho / u**2)[:, None, None] * I + (rho * (4.0 / u**4 - 8.0 / u**3))[:, None, None] * ss
        return self.constant * m ** (self.dim + 2) * H


MollifierKernel = Kernel


def kernel_eval(dim: int, m: float, X) -> np.ndarray:
    """``rho_m(x) = m^dim rho(m x)`` with the normalized kernel."""
    return Kernel(dim).value(X, m)


@dataclass(frozen=True)
class Rule:
    """Quadrature on the unit ball: nodes ``s`` with value/gradient/Hessian weights.

    The value weights sum to exactly one, so the discrete operator is an
    average of translates (constants, Lipschitz bounds and transversality
    are preserved without quadrature error).
    """

    nodes: np.ndarray
    w0: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@lru_cache(maxsize=None)
def ball_rule(dim: int) -> Rule:
    if dim == 1:
        x, w = np.polynomial.legendre.leggauss(PANEL_NODES)
        # two panels split at the origin
        s = np.concatenate([(x - 1) / 2, (x + 1) / 2])[:, None]
        wq = np.concatenate([w, w]) / 2
    elif dim == 2:
        x, w = np.polynomial.legendre.leggauss(RADIAL_NODES)
        r = (x + 1) / 2
        wr = w / 2 * r
        th = 2 * np.pi * (np.arange(ANGULAR_NODES) + 0.5) / ANGULAR_NODES
        s = np.stack([np.outer(r, np.cos(th)).ravel(), np.outer(r, np.sin(th)).ravel()], axis=1)
        wq = np.outer(wr, np.full(ANGULAR_NODES, 2 * np.pi / ANGULAR_NODES)).ravel()
    else:
        raise GeometryError("mollification is implemented for 1 or 2 tangential variables")
    k = Kernel(dim)
    raw = wq * bump(np.sum(s * s, axis=1))
    Z = raw.sum()
    c = k.constant
    w0 = raw / Z
    w1 = wq[:, None] * k.gradient(s) / (c * Z)
    w2 = wq[:, None, None] * k.hessian(s) / (c * Z)
    # moment correction: exact derivatives of affine functions and of |s|^2
    w1 = w1 / np.mean(np.diag(-np.einsum("qk,ql->kl", w1, s)))
    half = np.sum(s * s, axis=1) / 2
    S0 = np.trace(w2.sum(axis=0))
    S2 = np.trace(np.einsum("qkl,q->kl", w2, half))
    mu = np.sum(w0 * half)
    a = dim / (S2 - S0 * mu)
    b = -a * S0 / dim
    w2 = a * w2 + b * w0[:, None, None] * np.eye(dim)
    for arr in (w0, w1, w2):
        arr.setflags(write=False)
    return Rule(s, w0, w1, w2)


def mollify_values(values: np.ndarray, m: float, order: int, rule: Rule):
    """Combine samples ``values[p, q] = phi(x_p - s_q / m)`` into derivatives."""
    out = [values @ rule.w0]
    if order >= 1:
        out.append(m * (values @ rule.w1))
    if order >= 2:
        out.append(m * m * np.einsum("pq,qkl->pkl", values, rule.w2))
    return tuple(out)


def mollify(fn: Callable[[np.ndarray], np.ndarray], m: float, Y, order: int = 0,
            radius: Optional[float] = None):
    """``M_m(fn)`` and its derivatives at the points ``Y`` (shape ``(P, k)``).

    ``fn`` maps an array of points to values.  When ``radius`` is given the
    queries must keep the kernel support inside ``B'_radius``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    k = Y.shape[1]
    if radius is not None:
        if np.any(np.linalg.norm(Y, axis=1) > radius - 1.0 / m + 1e-12):
            raise GeometryError("query closer than 1/m to the boundary of the chart ball")
    rule = ball_rule(k)
    pts = Y[:, None, :] - rule.nodes[None, :, :] / m
    vals = np.asarray(fn(pts.reshape(-1, k)), dtype=float).reshape(len(Y), -1)
    return mollify_values(vals, m, order, rule)


def mollify_derivatives(fn, m, Y, order=1, radius=None):
    return mollify(fn, m, Y, order, radius)[order]


def mollify_chart(chart: Chart, m: float, Y, order: int = 0):
    return mollify(chart.value, m, Y, order, chart.radius)


def sup_deviation(chart: Chart, m: float, res: Optional[int] = None) -> float:
    """``sup |M_m(phi) - phi|`` over ``B'_{R - 1/m}``, grid search plus refinement."""
    k = chart.dim - 1
    rad = chart.radius - 1.0 / m
    if rad <= 0:
        raise GeometryError("1/m exceeds the chart radius")
    res = res or (2001 if k == 1 else 61)
    Y = ball_grid(rad, k, res)

    def dev(P):
        P = np.atleast_2d(P)
        return np.abs(mollify(chart.value, m, P)[0] - chart.value(P))

    d = dev(Y)
    best = float(np.max(d))
    step = 2 * rad / (res - 1)
    for idx in np.argsort(d)[-3:]:
        y0 = Y[idx]
        if k == 1:
            lo, hi = max(-rad, y0[0] - step), min(rad, y0[0] + step)
            r = minimize_scalar(lambda t: -dev([[t]])[0], bounds=(lo, hi), method="bounded",
                                options={"xatol": 1e-12})
            best = max(best, -float(r.fun))
        else:
            def obj(y):
                if np.linalg.norm(y) > rad:
                    return 0.0
                return -dev(y[None])[0]
            r = minimize(obj, y0, method="Nelder-Mead",
                         options={"xatol": 1e-10, "fatol": 1e-14, "initial_simplex":
                                  np.array([y0, y0 + [step, 0], y0 + [0, step]])})
            best = max(best, -float(r.fun))
    return best


class MollifiedChart:
    """``phi_m = M_m(phi) +/- (sup|M_m phi - phi| + L/m)`` on ``B'_{R-1/m}``."""

    def __init__(self, chart: Chart, m: float, side: str = "outer", deviation: Optional[float] = None):
        if side not in ("outer", "inner"):
            raise ValueError("side must be 'outer' or 'inner'")
        self.base = chart
        self.m = m
        self.side = side
        dev = sup_deviation(chart, m) if deviation is None else deviation
        sign = 1.0 if side == "outer" else -1.0
        self.deviation = dev
        self.offset = sign * (dev + chart.lipschitz / m)

    @property
    def radius(self) -> float:
        return self.base.radius - 1.0 / self.m

    def evaluate(self, Y, order=0):
        out = list(mollify(self.base.value, self.m, Y, order, self.base.radius))
        out[0] = out[0] + self.offset
        return tuple(out)

    def value(self, Y):
        return self.evaluate(Y, 0)[0]

    def gradient(self, Y):
        return self.evaluate(Y, 1)[1]

    def hessian(self, Y):
        return self.evaluate(Y, 2)[2]


# --- slab mollification --------------------------------------------------------

def slab_mollify(v: Callable[[np.ndarray], np.ndarray], m: float, X, order: int = 0):
    """Convolution of ``v`` in the first ``n-1`` variables only.

    Returns the value and, for ``order >= 1``, the tangential gradient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[1]
    rule = ball_rule(n - 1)
    pts = np.repeat(X[:, None, :], len(rule.nodes), axis=1)
    pts[:, :, :-1] -= rule.nodes[None] / m
    vals = np.asarray(v(pts.reshape(-1, n)), dtype=float).reshape(len(X), -1)
    return mollify_values(vals, m, order, rule)


def sqrt_slab(v, grad_v, m: float, X):
    """``sqrt(M~_m(v^2))``, its gradient, and ``sqrt(M~_m(|grad v|^2))``.

    The tangential derivative falls on the kernel; the vertical derivative
    commutes with the slab convolution.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sq, dsq = slab_mollify(lambda P: v(P) ** 2, m, X, 1)
    if np.any(sq < -1e-14):
        raise ArithmeticError("negative slab average of v^2 (quadrature failure)")
    sq = np.maximum(sq, 0.0)
    dn = slab_mollify(lambda P: 2 * v(P) * grad_v(P)[:, -1], m, X)[0]
    grad = np.column_stack([dsq, dn])
    vt = np.sqrt(sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        gt = np.where(vt[:, None] > 0, grad / (2 * vt[:, None]), 0.0)
    gg = slab_mollify(lambda P: np.sum(grad_v(P) ** 2, axis=1), m, X)[0]
    return vt, gt, np.sqrt(np.maximum(gg, 0.0))


# --- batched mollification of atlas charts -------------------------------------

CHUNK = 1 << 21


def mollify_atlas_charts(atlas, ids, Y, m: float, order: int = 0, clip: Optional[float] = None):
    """``M_m(phi^j)`` and derivatives at ``Y[p]`` for chart ``ids[p]``, batched.

    ``clip`` mollifies ``phi^j`` composed with the projection onto ``B'_clip``.
    """
    ids = np.asarray(ids)
    Y = np.asarray(Y, dtype=float).reshape(len(ids), -1)
    k = Y.shape[1]
    rule = ball_rule(k)
    Q = len(rule.nodes)
    out = [np.empty(len(ids))]
    if order >= 1:
        out.append(np.empty((len(ids), k)))
    if order >= 2:
        out.append(np.empty((len(ids), k, k)))
    step = max(1, CHUNK // Q)
    for a in range(0, len(ids), step):
        sl = slice(a, min(a + step, len(ids)))
        vals = atlas.eval_translates(ids[sl], Y[sl], rule.nodes / m, clip)
        res = mollify_values(vals, m, order, rule)
        for o in range(order + 1):
            out[o][sl] = res[o]
    return tuple(out)


def _deviation(atlas, ids, Y, m):
    return np.abs(mollify_atlas_charts(atlas, ids, Y, m)[0] - atlas.eval_charts(ids, Y)[0])


def atlas_deviations(atlas, m: float, res: Optional[int] = None, starts: int = 3,
                     iters: int = 48, ids=None) -> np.ndarray:
    """Per-chart ``sup |M_m(phi^j) - phi^j|`` over ``B'_{R - 1/m}``.

    Grid search over a ball grid, then a vectorized compass search started
    from the best ``starts`` grid nodes of every chart.  ``ids`` restricts the
    search to some charts (results in that order, not cached).
    """
    cache = atlas.__dict__.setdefault("_deviations", {})
    key = (float(m), res)
    if ids is None and key in cache:
        return cache[key]
    charts = np.arange(len(atlas)) if ids is None else np.asarray(ids)
    k = atlas.dim - 1
    rad = atlas.R - 1.0 / m
    if rad <= 0:
        raise GeometryError("1/m exceeds the chart radius")
    res = res or (401 if k == 1 else 41)
    Y = ball_grid(rad, k, res)
    N = len(charts)
    best = np.empty((N, starts))
    where = np.empty((N, starts, k))
    per = max(1, CHUNK // (len(Y) * len(ball_rule(k).nodes)))
    for a in range(0, N, per):
        cs = np.arange(a, min(a + per, N))
        d = _deviation(atlas, np.repeat(charts[cs], len(Y)), np.tile(Y, (len(cs), 1)), m).reshape(len(cs), -1)
        top = np.argsort(d, axis=1)[:, -starts:]
        best[cs] = np.take_along_axis(d, top, axis=1)
        where[cs] = Y[top]
    rep_ids = np.repeat(charts, starts)
    P = where.reshape(-1, k)
    val = best.ravel()
    step = np.full(len(P), 2 * rad / (res - 1))
    moves = np.concatenate([np.eye(k), -np.eye(k)])
    for _ in range(iters):
        cand = P[:, None, :] + step[:, None, None] * moves[None]
        norm = np.linalg.norm(cand, axis=2, keepdims=True)
        cand = np.where(norm > rad, cand * rad / np.maximum(norm, 1e-300), cand)
        dv = _deviation(atlas, np.repeat(rep_ids, len(moves)), cand.reshape(-1, k), m).reshape(len(P), -1)
        j = np.argmax(dv, axis=1)
        better = dv[np.arange(len(P)), j] > val
        P[better] = cand[better, j[better]]
        val = np.where(better, dv[np.arange(len(P)), j], val)
        step = np.where(better, step, step / 2)
    out = val.reshape(N, starts).max(axis=1)
    out.setflags(write=False)
    if ids is None:
        cache[key] = out
    return out


def kernel_integral(dim: int, m: float) -> float:
    """``int rho_m`` by adaptive quadrature of the radial profile (should be 1)."""
    sphere = 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)
    c = kernel_constant(dim)
    f = lambda r: sphere * r ** (dim - 1) * c * m**dim * math.exp(-1.0 / (1.0 - (m * r) ** 2)) if m * r < 1 else 0.0
    return quad(f, 0.0, 1.0 / m, epsabs=1e-15, epsrel=1e-13, limit=200)[0]


def mollifier_report(atlas, m: float, res: Optional[int] = None, ids=None) -> dict:
    """Kernel mass, sup deviation and sampled Lipschitz constants of ``M_m(phi^j)``.

    Each chart is extended to ``R^{n-1}`` by ``phi o P`` with ``P`` the projection
    onto ``B'_R``; the extension keeps the constant ``L``, so the contracts make
    sense for every ``m`` even when ``1/m > R``.  ``lipschitz`` is the largest
    difference quotient between neighbouring nodes of a grid on ``B'_R`` and
    ``gradient`` the largest sampled ``|grad M_m phi|``.  ``deviation`` also takes
    the refined search of ``atlas_deviations`` when ``1/m < R``.  ``ids``
    restricts the report to some charts.
    """
    charts = np.arange(len(atlas)) if ids is None else np.asarray(ids)
    k = atlas.dim - 1
    R = atlas.R
    res = res or (201 if k == 1 else 25)
    ax = np.linspace(-R / math.sqrt(k), R / math.sqrt(k), res)
    h = ax[1] - ax[0]
    G = np.stack(np.meshgrid(*([ax] * k), indexing="ij"), axis=-1).reshape(-1, k)
    shape = (res,) * k
    lip = grad = dev = 0.0
    per = max(1, CHUNK // (len(G) * len(ball_rule(k).nodes)))
    for a in range(0, len(charts), per):
        cs = charts[a:a + per]
        P, Y = np.repeat(cs, len(G)), np.tile(G, (len(cs), 1))
        v, g = mollify_atlas_charts(atlas, P, Y, m, 1, clip=R)
        dev = max(dev, float(np.max(np.abs(v - atlas.eval_charts(P, Y)[0]))))
        V = v.reshape((len(cs),) + shape)
        for d in range(k):
            lip = max(lip, float(np.max(np.abs(np.diff(V, axis=d + 1)))) / h)
        if k == 2:
            lip = max(lip, float(np.max(np.abs(V[:, 1:, 1:] - V[:, :-1, :-1]))) / (h * math.sqrt(2)))
            lip = max(lip, float(np.max(np.abs(V[:, 1:, :-1] - V[:, :-1, 1:]))) / (h * math.sqrt(2)))
        grad = max(grad, float(np.max(np.linalg.norm(g, axis=1))))
    if R - 1.0 / m > 0:
        dev = max(dev, float(np.max(atlas_deviations(atlas, m, ids=ids))))
    return {
        "m": float(m),
        "kernel_integral": kernel_integral(k, m),
        "rule_sum": float(np.sum(ball_rule(k).w0)),
        "deviation": dev,
        "deviation_bound": atlas.L / m,
        "lipschitz": lip,
        "gradient": grad,
        "L": atlas.L,
        "charts": int(len(charts)),
    }
