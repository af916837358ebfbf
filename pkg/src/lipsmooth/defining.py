"""Boundary defining functions, region classification and implicit chart extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Atlas, GeometryError, ball_grid, implicit_graph_derivatives
from .mollify import atlas_deviations, mollify_atlas_charts
from .partition import Partition

VARIANTS = ("exact", "outer", "inner")

# region codes returned by classify
INNER = 0          # in omega_m
INNER_SHELL = 1    # in Omega minus omega_m
OUTER_SHELL = 2    # in Omega_m minus Omega
OUTSIDE = 3        # outside Omega_m
REGION_NAMES = ("inner", "inner_shell", "outer_shell", "outside")


class ExtractionError(GeometryError):
    """Root finding failed: no sign change or the transversality floor is violated."""


class DefiningFunction:
    """``F = sum_j f^j xi_j - xi_0`` with ``f^j = z_n - phi^j(z')`` and ``z = T^j x``.

    ``variant="outer"`` uses ``phi_m^j = M_m(phi^j) + c_m^j`` (sublevel set
    ``Omega_m``); ``"inner"`` uses ``M_m(phi^j) - c_m^j`` (``omega_m``), where
    ``c_m^j = sup |M_m(phi^j) - phi^j| + L/m`` on ``B'_{R - 1/m}``.
    """

    def __init__(self, atlas: Atlas, partition: Optional[Partition] = None, variant: str = "exact",
                 m: Optional[float] = None, deviations: Optional[np.ndarray] = None):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if variant != "exact" and (m is None or m <= 0):
            raise ValueError("mollified variants need a positive index m")
        self.atlas = atlas
        self.partition = partition or Partition(atlas)
        self.variant = variant
        self.m = None if variant == "exact" else float(m)
        self.offsets = None
        if variant != "exact":
            if atlas.R - 1.0 / self.m <= self.partition.reach:
                raise GeometryError(
                    f"m = {m:g} too small: 1/m leaves no room for the chart terms inside B'_R"
                )
            dev = atlas_deviations(atlas, self.m) if deviations is None else np.asarray(deviations)
            self.deviations = dev
            sign = 1.0 if variant == "outer" else -1.0
            self.offsets = sign * (dev + atlas.L / self.m)

    @property
    def dim(self) -> int:
        return self.atlas.dim

    # --- chart terms ----------------------------------------------------------

    def chart_terms(self, ids, X, order: int = 0):
        """``f^j(x)`` and its world derivatives for pairs ``(ids[p], X[p])``."""
        atlas = self.atlas
        ids = np.asarray(ids)
        X = np.atleast_2d(X)
        k = self.dim - 1
        rot = atlas.rotations[ids]
        Z = np.einsum("pij,pj->pi", rot, X - atlas.centers[ids])
        Y, zn = Z[:, :k], Z[:, k]
        if self.variant == "exact":
            phi = atlas.eval_charts(ids, Y, order)
        else:
            lim = atlas.R - 1.0 / self.m
            out = np.linalg.norm(Y, axis=1) > lim
            if np.any(out):
                raise GeometryError(
                    f"chart term of chart {int(ids[np.argmax(out)])} needed outside B'_(R-1/m)"
                )
            phi = list(mollify_atlas_charts(atlas, ids, Y, self.m, order))
            phi[0] = phi[0] + self.offsets[ids]
        f = zn - phi[0]
        res = [f]
        if order >= 1:
            tang = rot[:, :k, :]
            res.append(rot[:, k, :] - np.einsum("pk,pki->pi", phi[1], tang))
            if order >= 2:
                res.append(-np.einsum("pki,pkl,plj->pij", tang, phi[2], tang))
        return tuple(res)

    # --- evaluation -------------------------------------------------------------

    def evaluate(self, X, order: int = 0, strict: bool = False, sdist=None):
        """``F`` (and gradient, Hessian) at ``X``; NaN outside the cover ``W``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = self.dim
        pv = self.partition.evaluate(X, order, sdist=sdist)
        inW = pv.in_cover
        if strict and not np.all(inW):
            raise GeometryError("point outside the cover W")
        active = (pv.idx >= 0) & (pv.xi > 0)
        if order >= 1:
            active |= (pv.idx >= 0) & np.any(pv.dxi != 0, axis=-1)
        p, kk = np.nonzero(active)
        F = -pv.xi0.copy()
        G = -pv.dxi0.copy() if order >= 1 else None
        H = -pv.d2xi0.copy() if order >= 2 else None
        if len(p):
            terms = self.chart_terms(pv.idx[p, kk], X[p], order)
            xi = pv.xi[p, kk]
            F += np.bincount(p, terms[0] * xi, minlength=len(X))
            if order >= 1:
                dxi = pv.dxi[p, kk]
                g = terms[1] * xi[:, None] + terms[0][:, None] * dxi
                for d in range(n):
                    G[:, d] += np.bincount(p, g[:, d], minlength=len(X))
                if order >= 2:
                    h = (terms[2] * xi[:, None, None]
                         + terms[1][:, :, None] * dxi[:, None, :]
                         + dxi[:, :, None] * terms[1][:, None, :]
                         + terms[0][:, None, None] * pv.d2xi[p, kk])
                    for a in range(n):
                        for b in range(n):
                            H[:, a, b] += np.bincount(p, h[:, a, b], minlength=len(X))
        F = np.where(inW, F, np.nan)
        out = [F]
        if order >= 1:
            out.append(np.where(inW[:, None], G, np.nan))
        if order >= 2:
            out.append(np.where(inW[:, None, None], H, np.nan))
        return tuple(out) if order else F

    def __call__(self, X):
        return self.evaluate(X, 0)


def defining_triple(atlas: Atlas, m: float, partition: Optional[Partition] = None):
    """``(F_m, F, F~_m)`` sharing one partition and one set of offsets."""
    part = partition or Partition(atlas)
    dev = atlas_deviations(atlas, m)
    return (DefiningFunction(atlas, part, "outer", m, dev),
            DefiningFunction(atlas, part, "exact"),
            DefiningFunction(atlas, part, "inner", m, dev))


@dataclass
class Classification:
    region: np.ndarray
    band: np.ndarray
    values: np.ndarray  # columns F_m, F, F~_m

    def count(self) -> dict:
        return {name: int(np.sum(self.region == c)) for c, name in enumerate(REGION_NAMES)}


def classify(triple, X) -> Classification:
    """Region of each point from the signs of ``(F_m, F, F~_m)``.

    Points outside the cover ``W`` are outside every set.  ``band`` marks
    ``|F| <= 3L/m``.
    """
    Fm, F, Ft = triple
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sd = F.atlas.signed_distance(X)
    vals = np.column_stack([Fm.evaluate(X, sdist=sd), F.evaluate(X, sdist=sd), Ft.evaluate(X, sdist=sd)])
    region = np.full(len(X), OUTSIDE)
    ok = np.all(np.isfinite(vals), axis=1)
    v = vals[ok]
    r = np.where(v[:, 2] < 0, INNER, np.where(v[:, 1] < 0, INNER_SHELL, np.where(v[:, 0] < 0, OUTER_SHELL, OUTSIDE)))
    region[ok] = r
    band = ok.copy()
    band[ok] = np.abs(v[:, 1]) <= 3 * F.atlas.L / Fm.m
    return Classification(region, band, vals)


@dataclass
class SandwichGaps:
    lower: np.ndarray   # F - F_m
    upper: np.ndarray   # F~_m - F
    weight: np.ndarray  # sum_{j >= 1} xi_j


def sandwich_gaps(triple, X) -> SandwichGaps:
    """``F - F_m`` and ``F~_m - F`` summed chart by chart.

    Both equal ``sum_j xi_j * (difference of chart terms)``; forming them
    directly avoids the cancellation against ``xi_0`` that hides gaps below
    the rounding level of ``F`` itself.  NaN outside the cover.
    """
    Fm, F, Ft = triple
    X = np.atleast_2d(np.asarray(X, dtype=float))
    pv = F.partition.evaluate(X)
    p, k = np.nonzero((pv.idx >= 0) & (pv.xi > 0))
    ids = pv.idx[p, k]
    f = F.chart_terms(ids, X[p])[0]
    xi = pv.xi[p, k]
    lo = np.bincount(p, xi * (f - Fm.chart_terms(ids, X[p])[0]), minlength=len(X))
    hi = np.bincount(p, xi * (Ft.chart_terms(ids, X[p])[0] - f), minlength=len(X))
    w = np.bincount(p, xi, minlength=len(X))
    bad = ~pv.in_cover
    return SandwichGaps(np.where(bad, np.nan, lo), np.where(bad, np.nan, hi), np.where(bad, np.nan, w))


# --- band containment -----------------------------------------------------------

@dataclass
class BandReport:
    m: float
    samples: int
    band_samples: int
    outside_balls: int
    interior_overlap: int

    @property
    def violations(self) -> int:
        return self.outside_balls + self.interior_overlap

    @property
    def ok(self) -> bool:
        return self.violations == 0


def band_samples(atlas: Atlas, m: float, count: int = 20000, seed: int = 0) -> np.ndarray:
    """Points in a tube around the boundary wide enough to contain ``|F| <= 3L/m``."""
    rng = np.random.default_rng(seed)
    S = atlas.sample
    pick = rng.integers(0, len(S.points), count)
    width = min(atlas.R / 4, 4 * 3 * atlas.L * math.sqrt(1 + atlas.L**2) / m)
    t = rng.uniform(-width, width, count)
    jitter = rng.normal(size=(count, atlas.dim)) * S.spacing
    return S.points[pick] + t[:, None] * S.normals[pick] + jitter


def hausdorff_band_check(F: DefiningFunction, m: float, count: int = 20000, seed: int = 0) -> BandReport:
    """Check ``{|F| <= 3L/m}`` lies in ``U B_{R/8}(x^i)`` and misses ``supp xi_0``."""
    atlas = F.atlas
    X = band_samples(atlas, m, count, seed)
    sd = atlas.signed_distance(X)
    val = F.evaluate(X, sdist=sd)
    pv = F.partition.evaluate(X, sdist=sd)
    band = np.isfinite(val) & (np.abs(val) <= 3 * atlas.L / m)
    d, _ = atlas.center_tree.query(X[band])
    return BandReport(m, count, int(band.sum()), int(np.sum(d >= atlas.R / 8)),
                      int(np.sum(pv.xi0[band] > 0)))


# --- extraction -------------------------------------------------------------------

@dataclass
class ExtractedChart:
    """Implicit chart ``psi`` of ``{F = 0}`` in the frame of chart ``index``."""

    index: int
    m: Optional[float]
    side: str
    nodes: np.ndarray
    values: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    vertical: np.ndarray
    base: tuple = field(repr=False, default=())
    window: float = 0.0

    @property
    def vertical_margin(self) -> float:
        return float(np.min(self.vertical))

    def points(self, atlas: Atlas) -> np.ndarray:
        """World coordinates of the graph points."""
        k = self.nodes.shape[1]
        rot = atlas.rotations[self.index]
        return atlas.centers[self.index] + self.nodes @ rot[:k] + self.values[:, None] * rot[k]


@dataclass
class RootResult:
    values: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    vertical: np.ndarray
    ok: np.ndarray
    iterations: int


def solve_roots(F: DefiningFunction, ids, Y, bisect_tol: float = 1e-3, newton_tol: float = 1e-12,
                max_newton: int = 50) -> RootResult:
    """Roots ``t`` of ``F(T_i^{-1}(y', t)) = 0`` for pairs ``(ids[p], Y[p])``.

    Start at ``phi^i(y')`` and expand in steps ``(L/m) 2^k`` towards the side
    of the sign change, bisect to ``bisect_tol * ell``, then polish by
    safeguarded Newton with the analytic vertical derivative.
    """
    atlas = F.atlas
    ids = np.asarray(ids)
    Y = np.asarray(Y, dtype=float).reshape(len(ids), -1)
    k = Y.shape[1]
    ell = atlas.ell
    rot = atlas.rotations[ids]
    O = atlas.centers[ids] + np.einsum("pk,pkj->pj", Y, rot[:, :k, :])
    U = rot[:, k, :]

    def G(t, sel, order=0):
        X = O[sel] + t[:, None] * U[sel]
        res = F.evaluate(X, order)
        if order == 0:
            return res
        return res[0], np.einsum("pi,pi->p", res[1], U[sel])

    P = len(ids)
    t0 = atlas.eval_charts(ids, Y)[0]
    g0 = G(t0, np.arange(P))
    ok = np.isfinite(g0)
    lo = t0.copy()
    hi = t0.copy()
    done = ok & (g0 == 0)
    # F increases upward, so a negative value means the root lies above
    direction = np.where(g0 < 0, 1.0, -1.0)
    cur = t0.copy()
    step = np.full(P, atlas.L / (F.m if F.m else 64.0))
    shrinks = np.zeros(P, dtype=int)
    todo = np.flatnonzero(ok & ~done)
    while len(todo):
        t = cur[todo] + direction[todo] * step[todo]
        g = np.full(len(todo), np.nan)
        inside = np.abs(t) < ell
        if np.any(inside):
            g[inside] = G(t[inside], todo[inside])
        lost = ~np.isfinite(g)
        # leaving the cover or the cylinder: retry closer to the last good point
        step[todo[lost]] /= 2
        shrinks[todo[lost]] += 1
        flip = ~lost & (np.sign(g) != np.sign(g0[todo]))
        zero = flip & (g == 0)
        up = direction[todo] > 0
        fl = todo[flip]
        lo[fl] = np.where(up[flip], cur[fl], t[flip])
        hi[fl] = np.where(up[flip], t[flip], cur[fl])
        lo[todo[zero]] = hi[todo[zero]] = t[zero]
        done[todo[zero]] = True
        same = todo[~lost & ~flip]
        cur[same] = t[~lost & ~flip]
        step[same] *= 2
        ok[todo[shrinks[todo] > 60]] = False
        todo = todo[~flip & (shrinks[todo] <= 60)]
    # brackets are oriented so that G(lo) < 0 < G(hi)
    act = np.flatnonzero(ok & ~done)
    width = bisect_tol * ell
    while True:
        act = act[(hi[act] - lo[act]) > width]
        if len(act) == 0:
            break
        mid = (lo[act] + hi[act]) / 2
        g = G(mid, act)
        neg = g < 0
        lo[act[neg]] = mid[neg]
        hi[act[~neg]] = mid[~neg]
    act = np.flatnonzero(ok & ~done)
    t = (lo + hi) / 2
    it = 0
    tol = newton_tol * ell
    while len(act) and it < max_newton:
        it += 1
        g, gt = G(t[act], act, 1)
        neg = g < 0
        lo[act[neg]] = np.maximum(lo[act[neg]], t[act[neg]])
        hi[act[~neg]] = np.minimum(hi[act[~neg]], t[act[~neg]])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = -g / gt
        new = t[act] + step
        inside = np.isfinite(new) & (new > lo[act]) & (new < hi[act])
        new = np.where(inside, new, (lo[act] + hi[act]) / 2)
        conv = np.abs(new - t[act]) <= tol
        t[act] = new
        act = act[~conv]
    ok[act] = False
    X = O + t[:, None] * U
    vals = F.evaluate(X, 2)
    gz = np.einsum("pij,pj->pi", rot, vals[1])
    Hz = np.einsum("pia,pab,pjb->pij", rot, vals[2], rot)
    dpsi, hpsi = implicit_graph_derivatives(gz, Hz)
    ok &= np.isfinite(vals[0])
    return RootResult(t, dpsi, hpsi, gz[:, -1], ok, it)


def extract_charts(F: DefiningFunction, ids: Optional[Sequence[int]] = None, res: int = 33,
                   window: Optional[float] = None, strict: bool = True) -> list:
    """Extracted charts on a ball grid over ``B'_window`` (default ``R - 2 eps0``)."""
    atlas = F.atlas
    ids = list(range(len(atlas))) if ids is None else list(ids)
    window = atlas.window if window is None else window
    k = atlas.dim - 1
    nodes = ball_grid(window, k, res)
    allid = np.repeat(ids, len(nodes))
    allY = np.tile(nodes, (len(ids), 1))
    rr = solve_roots(F, allid, allY)
    if strict and not np.all(rr.ok):
        bad = int(allid[np.argmin(rr.ok)])
        raise ExtractionError(
            f"no root of the defining function on chart {bad} (m = {F.m}): m is below m0"
        )
    floor = 1.0 / (2 * math.sqrt(1 + atlas.L**2))
    if strict and F.variant != "exact" and np.min(rr.vertical[rr.ok]) < floor - 1e-9:
        raise ExtractionError(
            f"vertical derivative {np.min(rr.vertical):.3g} below the floor {floor:.3g} (m = {F.m})"
        )
    base = atlas.eval_charts(allid, allY, 2)
    out = []
    G = len(nodes)
    for c, i in enumerate(ids):
        sl = slice(c * G, (c + 1) * G)
        out.append(ExtractedChart(i, F.m, F.variant, nodes, rr.values[sl], rr.grad[sl], rr.hess[sl],
                                  rr.vertical[sl], tuple(b[sl] for b in base), window))
    return out


def extract_chart(F: DefiningFunction, i: int, res: int = 33, window: Optional[float] = None) -> ExtractedChart:
    return extract_charts(F, [i], res, window)[0]


# --- m0 detection ------------------------------------------------------------------

@dataclass
class M0Record:
    m: float
    roots_found: bool
    vertical_margin: float
    band: Optional[BandReport]
    reason: str = ""

    @property
    def ok(self) -> bool:
        return not self.reason


def probe_m(atlas: Atlas, m: float, partition: Optional[Partition] = None, res: int = 9) -> M0Record:
    """Check the vertical-derivative margin and band containment at one ``m`` on a coarse grid."""
    part = partition or Partition(atlas)
    floor = 1.0 / (2 * math.sqrt(1 + atlas.L**2))
    try:
        Fm, F, Ft = defining_triple(atlas, m, part)
    except GeometryError as exc:
        return M0Record(m, False, float("nan"), None, str(exc))
    band = hausdorff_band_check(F, m)
    margin = math.inf
    try:
        for D in (Fm, Ft):
            k = atlas.dim - 1
            nodes = ball_grid(atlas.window, k, res)
            rr = solve_roots(D, np.repeat(np.arange(len(atlas)), len(nodes)), np.tile(nodes, (len(atlas), 1)))
            if not np.all(rr.ok):
                return M0Record(m, False, float("nan"), band, "no sign change on some chart")
            margin = min(margin, float(np.min(rr.vertical)))
    except GeometryError as exc:
        return M0Record(m, False, float("nan"), band, str(exc))
    reason = ""
    if margin < floor - 1e-9:
        reason = f"vertical margin {margin:.4g} below {floor:.4g}"
    elif not band.ok:
        reason = f"band containment violated at {band.violations} samples"
    return M0Record(m, True, margin, band, reason)


def detect_m0(atlas: Atlas, ladder: Sequence[float] = (4, 8, 16, 32, 64, 128, 256, 512),
              partition: Optional[Partition] = None, res: int = 9):
    """Smallest ``m`` on the ladder passing :func:`probe_m`, and the log of probes."""
    part = partition or Partition(atlas)
    log = []
    for m in ladder:
        rec = probe_m(atlas, m, part, res)
        log.append(rec)
        if rec.ok:
            return m, log
    return None, log
