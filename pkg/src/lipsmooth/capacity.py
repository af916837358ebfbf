"""Discrete capacities, curvature-weighted boundary masses and isocapacitary estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import pyamg
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import cg

from .curvature import exact_solver, root_solver, weak_curvature
from .geometry import Atlas
from .partition import Partition

R0_CONSTANT = 16.0     # C(n) in r0 = R / (C(n) (1 + L^2))
ESTIMATE_CONSTANT = 2.0  # value given to every generic c(n) of the final estimate
FAMILY = (1 / 16, 1 / 8, 1 / 4, 1 / 2)
CG_RTOL = 1e-10


class CapacityError(RuntimeError):
    pass


# --- capacity solver -------------------------------------------------------------

@dataclass
class CapacityProblem:
    """Capacity of ``E`` relative to ``B_r(center)`` on a grid of step ``h``.

    ``E`` is a predicate on points, ``E(X) -> bool array``.
    """

    center: np.ndarray
    radius: float
    E: Callable[[np.ndarray], np.ndarray]
    h: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0 or self.h <= 0:
            raise ValueError("radius and grid step must be positive")
        if self.h > self.radius / 64 * (1 + 1e-12):
            raise ValueError(f"grid step {self.h:g} is coarser than r/64 = {self.radius / 64:g}")

    @property
    def dim(self) -> int:
        return len(self.center)

    def grid(self):
        """Axis coordinates of the box grid centred on the ball."""
        q = int(math.ceil(self.radius / self.h))
        return [c + self.h * np.arange(-q, q + 1) for c in self.center]


@dataclass
class CapacityResult:
    value: float
    potential: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    axes: list = field(repr=False, default_factory=list)

    def interpolator(self):
        return RegularGridInterpolator(self.axes, self.potential, bounds_error=False, fill_value=0.0)


def solve_capacity(problem: CapacityProblem, maxiter: int = 2000) -> CapacityResult:
    """Discrete equilibrium potential: 1 on ``E``, 0 on and outside ``dB_r``, harmonic elsewhere.

    The standard 2n+1 point Laplacian is solved by conjugate gradients with an
    algebraic multigrid preconditioner; the value is the discrete Dirichlet energy.
    """
    n, h = problem.dim, problem.h
    axes = problem.grid()
    shape = tuple(len(a) for a in axes)
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    dist = np.linalg.norm(X - problem.center, axis=1)
    inside = dist < problem.radius
    inE = np.asarray(problem.E(X), dtype=bool) & inside
    if not inE.any():
        raise CapacityError("E contains no grid node")
    if np.any(dist[inE] > problem.radius - h):
        raise CapacityError("E touches the boundary of the ball (no one-cell margin)")
    free = inside & ~inE
    del X
    number = np.full(len(free), -1)
    number[free] = np.arange(int(free.sum()))
    nf = int(free.sum())
    grid_idx = np.arange(len(free)).reshape(shape)
    rows, cols = [], []
    rhs = np.zeros(nf)
    for d in range(n):
        a = np.take(grid_idx, np.arange(shape[d] - 1), axis=d).ravel()
        b = np.take(grid_idx, np.arange(1, shape[d]), axis=d).ravel()
        for p, q in ((a, b), (b, a)):
            fp = free[p]
            p, q = p[fp], q[fp]
            fq = free[q]
            rows.append(number[p[fq]])
            cols.append(number[q[fq]])
            np.add.at(rhs, number[p[inE[q]]], 1.0)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    A = sp.coo_matrix((-np.ones(len(rows)), (rows, cols)), shape=(nf, nf)).tocsr()
    A = A + sp.identity(nf, format="csr") * (2 * n)
    A.sort_indices()
    it = [0]

    def count(_):
        it[0] += 1
    if nf:
        ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric", max_coarse=500)
        u, info = cg(A, rhs, rtol=CG_RTOL, atol=0.0, M=ml.aspreconditioner(), maxiter=maxiter, callback=count)
        if info != 0:
            raise CapacityError(f"conjugate gradients did not converge in {maxiter} iterations")
        res = float(np.max(np.abs(A @ u - rhs))) if nf else 0.0
    else:
        u, res = np.zeros(0), 0.0
    v = np.zeros(len(free))
    v[inE] = 1.0
    v[free] = u
    V = v.reshape(shape)
    energy = 0.0
    for d in range(n):
        energy += float(np.sum(np.diff(V, axis=d) ** 2))
    return CapacityResult(energy * h ** (n - 2), V, res, it[0], axes)


def ball_capacity(n: int, inner: float, outer: float, h: float, center=None) -> CapacityResult:
    """Numerical capacity of the closed ball ``B_inner`` relative to the concentric ``B_outer``."""
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    E = lambda X: np.linalg.norm(X - c, axis=1) <= inner
    return solve_capacity(CapacityProblem(c, outer, E, h))


def analytic_ball_capacity(n: int, inner: float, outer: float) -> float:
    """``2 pi / log(r/s)`` in the plane, ``(n-2) |S^{n-1}| / (s^{2-n} - r^{2-n})`` otherwise."""
    if not 0 < inner < outer:
        raise ValueError("need 0 < inner < outer")
    if n == 2:
        return 2 * math.pi / math.log(outer / inner)
    area = 2 * math.pi ** (n / 2) / math.gamma(n / 2)
    return (n - 2) * area / (inner ** (2 - n) - outer ** (2 - n))


@lru_cache(maxsize=None)
def _unit_family_capacity(n: int, sigma: float, res: int) -> float:
    return ball_capacity(n, sigma, 1.0, 1.0 / res).value


def family_capacity(n: int, sigma: float, r: float, res: int = 128) -> float:
    """Numerical ``cap(B_{sigma r}, B_r)``; computed at ``r = 1`` and scaled by ``r^{n-2}``."""
    return _unit_family_capacity(n, float(sigma), int(res)) * r ** (n - 2)


# --- boundary representations ------------------------------------------------------------

@dataclass
class BoundaryRep:
    """A boundary given chart by chart through ``solver(ids, Y) -> (t, grad, hess, ok)``."""

    atlas: Atlas
    partition: Partition
    solver: Callable
    name: str = "boundary"

    @property
    def dim(self) -> int:
        return self.atlas.dim

    def points(self, ids, Y=None) -> np.ndarray:
        """World points of the charts ``ids`` above ``Y`` (default the chart origins)."""
        atlas = self.atlas
        ids = np.asarray(ids)
        k = atlas.dim - 1
        Y = np.zeros((len(ids), k)) if Y is None else np.asarray(Y, dtype=float).reshape(len(ids), k)
        t, _, _, ok = self.solver(ids, Y)
        if not np.all(ok):
            raise ArithmeticError("boundary evaluation failed")
        rot = atlas.rotations[ids]
        return atlas.centers[ids] + np.einsum("pk,pkj->pj", Y, rot[:, :k, :]) + t[:, None] * rot[:, k, :]


def exact_boundary(atlas: Atlas, partition: Optional[Partition] = None) -> BoundaryRep:
    return BoundaryRep(atlas, partition or Partition(atlas), exact_solver(atlas), atlas.name)


def approx_boundary(F) -> BoundaryRep:
    """Zero set of a (mollified) defining function."""
    return BoundaryRep(F.atlas, F.partition, root_solver(F), f"{F.atlas.name}:{F.variant}:{F.m:g}")


@dataclass
class BallQuadrature:
    """Boundary quadrature restricted to balls: nodes, weights ``dH`` and ``|B|``."""

    ball: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    curvature: np.ndarray

    def sums(self, count: int, density=None) -> np.ndarray:
        d = self.weights * self.curvature
        if density is not None:
            d = d * density
        return np.bincount(self.ball, d, minlength=count)


def ball_quadrature(rep: BoundaryRep, centers, radii, res: Optional[int] = None) -> BallQuadrature:
    """Chart quadrature of ``dB ∩ B̄_s(x)`` for each ball, with partition weights on overlaps.

    Every chart whose partition function can meet the ball contributes a uniform
    midpoint grid (``res`` cells per axis) over the part of its window under the ball.
    """
    atlas, part = rep.atlas, rep.partition
    n, k = atlas.dim, atlas.dim - 1
    res = res or (256 if k == 1 else 40)
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    s = np.broadcast_to(np.asarray(radii, dtype=float), (len(C),))
    reach = part.reach
    pairs = atlas.center_tree.query_ball_point(C, reach + s)
    bi = np.concatenate([np.full(len(p), b) for b, p in enumerate(pairs)]).astype(int)
    ci = np.concatenate([np.asarray(p, dtype=int) for p in pairs]).astype(int)
    if len(bi) == 0:
        return BallQuadrature(np.zeros(0, int), np.zeros((0, n)), np.zeros(0), np.zeros(0))
    rot = atlas.rotations[ci]
    yc = np.einsum("pkj,pj->pk", rot[:, :k, :], C[bi] - atlas.centers[ci])
    lo = np.maximum(yc - s[bi, None], -reach)
    hi = np.minimum(yc + s[bi, None], reach)
    ok = np.all(hi > lo, axis=1)
    bi, ci, rot, lo, hi = bi[ok], ci[ok], rot[ok], lo[ok], hi[ok]
    u = (np.arange(res) + 0.5) / res
    if k == 1:
        U = u[:, None]
    else:
        U = np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1).reshape(-1, 2)
    G = len(U)
    Y = (lo[:, None, :] + U[None] * (hi - lo)[:, None, :]).reshape(-1, k)
    cell = np.repeat(np.prod((hi - lo) / res, axis=1), G)
    pid = np.repeat(ci, G)
    ball = np.repeat(bi, G)
    keep = np.linalg.norm(Y, axis=1) <= reach
    Y, cell, pid, ball = Y[keep], cell[keep], pid[keep], ball[keep]
    t, g, hs, good = rep.solver(pid, Y)
    if not np.all(good):
        raise ArithmeticError("boundary chart evaluation failed inside a ball")
    R = atlas.rotations[pid]
    X = atlas.centers[pid] + np.einsum("pk,pkj->pj", Y, R[:, :k, :]) + t[:, None] * R[:, k, :]
    inball = np.linalg.norm(X - C[ball], axis=1) <= s[ball]
    X, g, hs, cell, pid, ball = X[inball], g[inball], hs[inball], cell[inball], pid[inball], ball[inball]
    pv = part.evaluate(X)
    mine = np.where(pv.idx == pid[:, None], pv.xi, 0.0).sum(axis=1)
    tot = np.where(pv.idx >= 0, pv.xi, 0.0).sum(axis=1)
    if np.any(tot <= 0):
        raise ValueError("the ball meets the boundary outside every chart window")
    w = cell * (mine / tot) * np.sqrt(1 + np.sum(g * g, axis=1))
    sel = mine > 0
    return BallQuadrature(ball[sel], X[sel], w[sel], weak_curvature(g[sel], hs[sel]).norm)


def weighted_boundary_mass(rep: BoundaryRep, centers, radii, res: Optional[int] = None) -> np.ndarray:
    """``int_{dB ∩ B̄_s(x)} |B| dH^{n-1}`` for every ball ``(x, s)``."""
    C = np.atleast_2d(centers)
    return ball_quadrature(rep, C, radii, res).sums(len(C))


# --- isocapacitary estimates ----------------------------------------------------------------

def r0(atlas: Atlas, C: float = R0_CONSTANT) -> float:
    return atlas.R / (C * (1 + atlas.L**2))


@dataclass
class IsocapSamples:
    """Lower estimate of ``K(r)`` over balls ``B̄_{sigma r}(x)``, ``x`` in a boundary sample."""

    r: float
    value: float
    family: tuple
    ratios: np.ndarray = field(repr=False)   # (centers, family)
    masses: np.ndarray = field(repr=False)
    capacities: np.ndarray = field(repr=False)
    argmax: tuple = ()


def estimate_K(rep: BoundaryRep, r: float, centers, family: Sequence[float] = FAMILY,
               cap_res: int = 128, quad_res: Optional[int] = None, limit: Optional[float] = None) -> IsocapSamples:
    """``max_{x, sigma} mass(B̄_{sigma r}(x)) / cap(B̄_{sigma r}(x), B_r(x))``.

    A lower estimate of the supremum over all compacta.  ``limit`` (default
    ``r0``) rejects larger radii; pass ``math.inf`` to evaluate anyway.
    """
    fam = tuple(sorted(float(f) for f in family))
    if not fam:
        raise ValueError("empty candidate family")
    if any(not 0 < f < 1 for f in fam):
        raise ValueError("family fractions must lie in (0, 1)")
    lim = r0(rep.atlas) if limit is None else limit
    if r > lim * (1 + 1e-12):
        raise ValueError(f"r = {r:g} exceeds r0 = {lim:g}")
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    n = rep.dim
    caps = np.array([family_capacity(n, f, r, cap_res) for f in fam])
    radii = np.concatenate([np.full(len(C), f * r) for f in fam])
    allc = np.tile(C, (len(fam), 1))
    mass = weighted_boundary_mass(rep, allc, radii, quad_res).reshape(len(fam), len(C)).T
    ratios = mass / caps[None, :]
    a = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
    return IsocapSamples(float(r), float(ratios[a]), fam, ratios, mass, caps, (int(a[0]), fam[a[1]]))


def estimate_constants(atlas: Atlas, diameter: float, c: float = ESTIMATE_CONSTANT) -> dict:
    """Explicit factors of the final comparison estimate with every ``c(n)`` set to ``c``."""
    n, L, R, d = atlas.dim, atlas.L, atlas.R, diameter
    A = c * (1 + L ** (n + 8)) * d**n / R**n
    B = c * (1 + L**3)
    Cr = c * (1 + L ** (31 if n == 2 else 25)) * d**n / R ** (n + 1)
    return {"c": c, "A": A, "B": B, "C": Cr, "c_hat": max(A, B, Cr)}


def _lower_order(n: int, r: float) -> float:
    return r * math.log(1 + 1 / r) if n == 2 else r


@dataclass
class IsocapComparison:
    m: float
    r: float
    K_m: float
    K_arg: float
    K_omega: float
    rhs: float
    rhs_chain: float
    holds: bool
    holds_chain: bool


def isocap_compare(rep: BoundaryRep, rep_m: BoundaryRep, r_values: Sequence[float], m: float,
                   centers, centers_m, diameter: float, family: Sequence[float] = FAMILY,
                   cap_res: int = 128, c: float = ESTIMATE_CONSTANT):
    """Both sides of the comparison ``K_{Omega_m}(r) <= c_hat {K_Omega(c_hat (r + 1/m)) + lower order}``.

    ``rhs`` uses a single ``c_hat``; ``rhs_chain`` keeps the separate factors
    ``A K(B (r + 1/m)) + C lower``.  Returns the rows and the constants.
    """
    atlas = rep.atlas
    n = atlas.dim
    k = estimate_constants(atlas, diameter, c)
    rows = []
    lim = r0(atlas)
    for r in r_values:
        if r > lim * (1 + 1e-12):
            raise ValueError(f"r = {r:g} exceeds r0 = {lim:g}")
        Km = estimate_K(rep_m, r, centers_m, family, cap_res).value
        arg = k["c_hat"] * (r + 1 / m)
        Ko = estimate_K(rep, arg, centers, family, cap_res, limit=math.inf).value
        rhs = k["c_hat"] * (Ko + _lower_order(n, r))
        arg2 = k["B"] * (r + 1 / m)
        Ko2 = estimate_K(rep, arg2, centers, family, cap_res, limit=math.inf).value
        chain = k["A"] * Ko2 + k["C"] * _lower_order(n, r)
        rows.append(IsocapComparison(float(m), float(r), Km, arg, Ko, rhs, chain, Km <= rhs, Km <= chain))
    return rows, k


# --- Maz'ya equivalence spot check ----------------------------------------------------------

@dataclass
class MazyaCheck:
    Q: float
    Rq: float
    tol: float
    lower_ok: bool
    upper_ok: bool
    dictionary: list

    @property
    def ok(self) -> bool:
        return self.lower_ok and self.upper_ok


def mazya_spot_check(rep: BoundaryRep, center, r: float, family: Sequence[float] = FAMILY,
                     res: int = 128, tol: float = 0.05, quad_res: Optional[int] = None,
                     kinds: Sequence[str] = ("tent", "potential")) -> MazyaCheck:
    """Capacity quotient ``Q`` against the Rayleigh-type quotient ``Rq`` on a finite dictionary.

    ``Q`` is the best ``mass(E)/cap(E, B_r)`` over ``E = B̄_{sigma r}(x)``;
    ``Rq`` is the best ``int v^2 |B| dH / int |grad v|^2`` over radial tents
    (1 on ``E``, linear to 0 at ``dB_r``) and the discrete equilibrium
    potentials of the same sets.
    """
    x = np.asarray(center, dtype=float)
    n = rep.dim
    h = r / res
    if h < r / 128 * (1 - 1e-12):
        raise ValueError("grid too fine for a spot check (h must be at least r/128)")
    fam = tuple(sorted(float(f) for f in family))
    quad = ball_quadrature(rep, x[None], [r], quad_res)
    dist = np.linalg.norm(quad.points - x, axis=1)
    Q = 0.0
    Rq = 0.0
    dictionary = []
    for f in fam:
        a = f * r
        cap = ball_capacity(n, a, r, h, center=x)
        mass = float(np.sum((quad.weights * quad.curvature)[dist <= a]))
        Q = max(Q, mass / cap.value)
        if "tent" in kinds:
            v = np.clip((r - dist) / (r - a), 0.0, 1.0)
            num = float(np.sum(quad.weights * quad.curvature * v * v))
            if n == 2:
                energy = math.pi * (r + a) / (r - a)
            else:
                area = 2 * math.pi ** (n / 2) / math.gamma(n / 2)
                energy = area * (r**n - a**n) / (n * (r - a) ** 2)
            dictionary.append(("tent", f, num / energy))
            Rq = max(Rq, num / energy)
        if "potential" in kinds:
            v = cap.interpolator()(quad.points)
            v = np.where(dist <= a, 1.0, v)
            num = float(np.sum(quad.weights * quad.curvature * v * v))
            dictionary.append(("potential", f, num / cap.value))
            Rq = max(Rq, num / cap.value)
    lower = Q <= Rq * (1 + tol)
    upper = Rq <= 4 * Q * (1 + tol) if Q > 0 else Rq == 0
    return MazyaCheck(Q, Rq, tol, lower, upper, dictionary)
