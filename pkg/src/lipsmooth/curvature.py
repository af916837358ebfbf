"""Fundamental forms, weak curvature and curvature integrals of graph charts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Atlas


@dataclass
class FundamentalForms:
    g: np.ndarray
    g_inv: np.ndarray


def forms(grad) -> FundamentalForms:
    """``g = I + grad grad^T`` and its closed-form inverse."""
    G = np.atleast_2d(np.asarray(grad, dtype=float))
    k = G.shape[1]
    outer = G[:, :, None] * G[:, None, :]
    I = np.eye(k)
    w = 1.0 + np.sum(G * G, axis=1)
    return FundamentalForms(I + outer, I - outer / w[:, None, None])


@dataclass
class CurvatureField:
    B: np.ndarray
    norm: np.ndarray


def weak_curvature(grad, hess) -> CurvatureField:
    """``B = hess / sqrt(1 + |grad|^2)`` and ``|B|^2 = tr((g^-1 hess)^2) / (1 + |grad|^2)``."""
    G = np.atleast_2d(np.asarray(grad, dtype=float))
    H = np.asarray(hess, dtype=float).reshape(len(G), G.shape[1], G.shape[1])
    w = 1.0 + np.sum(G * G, axis=1)
    f = forms(G)
    # scale out |hess| so the squared trace cannot underflow or overflow
    s = np.max(np.abs(H), axis=(1, 2))
    s = np.where(s > 0, s, 1.0)
    A = f.g_inv @ (H / s[:, None, None])
    tr = np.einsum("pij,pji->p", A, A)
    return CurvatureField(H / np.sqrt(w)[:, None, None], s * np.sqrt(np.maximum(tr, 0.0) / w))


def bbb_violations(grad, hess, L: float, rtol: float = 1e-10) -> int:
    """Nodes where ``|hess|/(1+L^2)^{3/2} <= |B| <= |hess|`` fails."""
    cf = weak_curvature(grad, hess)
    H = np.asarray(hess, dtype=float).reshape(len(cf.norm), -1)
    sc = np.max(np.abs(H), axis=1)
    sc = np.where(sc > 0, sc, 1.0)
    hn = sc * np.linalg.norm(H / sc[:, None], axis=1)
    lo = hn / (1 + L * L) ** 1.5
    tol = rtol * hn + 1e-300
    return int(np.sum((cf.norm < lo - tol) | (cf.norm > hn + tol)))


def trapezoid_grid(window: float, k: int, res: int):
    """Uniform nodes and trapezoid weights on ``[-window, window]^k``."""
    t = np.linspace(-window, window, res)
    w = np.full(res, t[1] - t[0])
    w[[0, -1]] /= 2
    if k == 1:
        return t[:, None], w
    Y = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    return Y, np.outer(w, w).ravel()


@dataclass
class SurfaceQuadrature:
    """Charts of a closed boundary with partition weights on a common node set."""

    ids: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    values: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    pou: np.ndarray

    @property
    def area_element(self) -> np.ndarray:
        return np.sqrt(1.0 + np.sum(self.grad**2, axis=1))

    def integrate(self, density: np.ndarray) -> float:
        return float(np.sum(self.weights * self.pou * self.area_element * density))

    def curvature(self) -> np.ndarray:
        return weak_curvature(self.grad, self.hess).norm

    def measure(self) -> float:
        return self.integrate(np.ones(len(self.values)))

    def curvature_integral(self, q: float = 1.0) -> float:
        if q < 1:
            raise ValueError("q must be at least 1")
        return self.integrate(self.curvature() ** q)


def surface_quadrature(atlas: Atlas, partition, solver, res: int = 65,
                       ids: Optional[Sequence[int]] = None) -> SurfaceQuadrature:
    """Quadrature of a boundary given chart-wise by ``solver(ids, Y) -> (t, grad, hess, ok)``.

    Each chart contributes on ``[-R/4, R/4]^{n-1}``, which contains the support of
    its partition function, weighted by ``xi_i / sum_{j >= 1} xi_j`` at the surface point.
    """
    k = atlas.dim - 1
    ids = np.arange(len(atlas)) if ids is None else np.asarray(ids)
    Y, w = trapezoid_grid(atlas.R / 4, k, res)
    allid = np.repeat(ids, len(Y))
    allY = np.tile(Y, (len(ids), 1))
    t, grad, hess, ok = solver(allid, allY)
    if not np.all(ok):
        raise ArithmeticError("surface quadrature: chart evaluation failed")
    rot = atlas.rotations[allid]
    X = atlas.centers[allid] + np.einsum("pk,pkj->pj", allY, rot[:, :k, :]) + t[:, None] * rot[:, k, :]
    pv = partition.evaluate(X)
    mine = np.where(pv.idx == allid[:, None], pv.xi, 0.0).sum(axis=1)
    tot = np.where(pv.idx >= 0, pv.xi, 0.0).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        pou = np.where(tot > 0, mine / tot, 0.0)
    return SurfaceQuadrature(allid, allY, np.tile(w, len(ids)), X, t, grad, hess, pou)


def exact_solver(atlas: Atlas):
    """Solver for ``surface_quadrature`` reading the atlas charts themselves."""
    def solve(ids, Y):
        v, g, h = atlas.eval_charts(ids, Y, 2)
        return v, g, h, np.isfinite(v)
    return solve


def root_solver(F):
    """Solver extracting the zero set of a defining function chart by chart."""
    from .defining import solve_roots

    def solve(ids, Y):
        rr = solve_roots(F, ids, Y)
        return rr.values, rr.grad, rr.hess, rr.ok
    return solve
