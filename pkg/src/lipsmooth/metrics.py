"""Distances, volumes, Sobolev errors and characteristics of the approximating domains."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .curvature import exact_solver, root_solver
from .defining import defining_triple, extract_charts
from .geometry import Atlas, ball_grid, point_diameter
from .partition import Partition

# Constants the reported bounds are checked against.
HAUSDORFF_CONST = 12.0
CHART_SUP_CONST = 6.0
DIAMETER_CONST = 2.0
LIPSCHITZ_CONST = 8.0
RADIUS_CONST = 8.0
W1P_EXPONENTS = (1, 2, 4)
W2Q_EXPONENTS = (1, 2)


def pinned_constants() -> dict:
    return {
        "hausdorff": HAUSDORFF_CONST,
        "chart_sup": CHART_SUP_CONST,
        "diameter": DIAMETER_CONST,
        "lipschitz": LIPSCHITZ_CONST,
        "radius": RADIUS_CONST,
    }


def hausdorff_bound(L: float, m: float) -> float:
    return HAUSDORFF_CONST * L * math.sqrt(1 + L * L) / m


def chart_sup_bound(L: float, m: float) -> float:
    return CHART_SUP_CONST * L * math.sqrt(1 + L * L) / m


# --- Hausdorff distance --------------------------------------------------------

@dataclass
class SampledBoundary:
    """Boundary points together with a bound on the distance from the true set to them."""

    points: np.ndarray
    error: float = 0.0


@dataclass
class HausdorffDistance:
    value: float
    error: float

    @property
    def upper(self) -> float:
        return self.value + self.error


def hausdorff(A, B) -> float:
    """Symmetric max-min distance between two point sets."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValueError("hausdorff distance of an empty sample set")
    dab, _ = cKDTree(B).query(A)
    dba, _ = cKDTree(A).query(B)
    return float(max(dab.max(), dba.max()))


def hausdorff_boundaries(A: SampledBoundary, B: SampledBoundary) -> HausdorffDistance:
    """Hausdorff distance of two sampled boundaries with the combined sampling error."""
    return HausdorffDistance(hausdorff(A.points, B.points), A.error + B.error)


def sample_boundary(atlas: Atlas, solver, m: float, radius: Optional[float] = None,
                    ids: Optional[Sequence[int]] = None) -> SampledBoundary:
    """Sample a boundary chart by chart over ``|y'| <= R/8`` at spacing at most ``1/(4m)``.

    ``solver(ids, Y) -> (t, grad, hess, ok)`` gives the graph of each chart.  The
    error is half a grid-cell diagonal stretched by the steepest sampled slope.
    """
    k = atlas.dim - 1
    radius = atlas.R / 8 if radius is None else radius
    res = int(math.ceil(2 * radius * 4 * m)) + 1
    res += 1 - res % 2
    h = 2 * radius / (res - 1)
    Y = ball_grid(radius, k, res)
    ids = np.arange(len(atlas)) if ids is None else np.asarray(ids)
    pts, slope = [], 0.0
    step = max(1, 50000 // len(Y))
    for c0 in range(0, len(ids), step):
        cs = ids[c0:c0 + step]
        allid = np.repeat(cs, len(Y))
        allY = np.tile(Y, (len(cs), 1))
        t, g, _, ok = solver(allid, allY)
        if not np.all(ok):
            raise ArithmeticError("boundary sampling: chart evaluation failed")
        rot = atlas.rotations[allid]
        pts.append(atlas.centers[allid] + np.einsum("pk,pkj->pj", allY, rot[:, :k, :]) + t[:, None] * rot[:, k, :])
        slope = max(slope, float(np.max(np.linalg.norm(g, axis=1))))
    return SampledBoundary(np.concatenate(pts), 0.5 * h * math.sqrt(k) * math.sqrt(1 + slope**2))


# --- volumes -------------------------------------------------------------------

GAP_REGIONS = ("outer", "inner", "outer_deficit", "inner_excess")


@dataclass
class VolumeGap:
    region: str
    value: float
    error: float
    h: float
    cells: int


def _tube_grid(atlas: Atlas, h: float, width: float):
    """Integer grid points (spacing ``h``) with ``|signed distance| <= width``."""
    n = atlas.dim
    lo, hi = atlas.bounding_box(width + h)
    q = max(1, int(width // h))
    H = q * h
    corner = np.floor(lo / H).astype(int)
    counts = np.ceil((hi - lo) / H).astype(int) + 1
    coarse = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), axis=-1).reshape(-1, n) + corner
    mid = (coarse + 0.5) * H
    near = np.abs(atlas.signed_distance(mid)) <= width + H * math.sqrt(n)
    local = np.stack(np.meshgrid(*([np.arange(q)] * n), indexing="ij"), axis=-1).reshape(-1, n)
    idx = (coarse[near] * q)[:, None, :] + local[None]
    idx = idx.reshape(-1, n)
    X = idx * h
    sd = atlas.signed_distance(X)
    keep = np.abs(sd) <= width
    return idx[keep], X[keep], sd[keep]


def _boundary_cells(idx: np.ndarray, mask: np.ndarray) -> int:
    """Grid points whose membership differs from one of their axis neighbours."""
    n = idx.shape[1]
    base = idx.min(axis=0) - 1
    span = idx.max(axis=0) - base + 2
    key = np.ravel_multi_index((idx - base).T, span)
    order = np.argsort(key)
    skey, smask = key[order], mask[order]
    differs = np.zeros(len(idx), dtype=bool)
    for d in range(n):
        for s in (-1, 1):
            nb = idx.copy()
            nb[:, d] += s
            nkey = np.ravel_multi_index((nb - base).T, span)
            pos = np.clip(np.searchsorted(skey, nkey), 0, len(skey) - 1)
            found = skey[pos] == nkey
            nmask = np.where(found, smask[pos], False)
            differs |= nmask != mask
    return int(np.sum(differs))


def lebesgue_gaps(triple, h: float, regions: Sequence[str] = GAP_REGIONS, width: Optional[float] = None) -> dict:
    """Grid counts of ``|Omega_m \\ Omega|``, ``|Omega \\ omega_m|`` and the two sandwich defects.

    Only points in a tube around the boundary are classified.  The exact function
    ``F`` is evaluated first; the mollified ones only where ``|F|`` is below the
    proven bound on ``|F_m - F|``.  The error bar counts grid cells on the edge of
    each counted set.
    """
    Fm, F, Ft = triple
    atlas = F.atlas
    L, m, n = atlas.L, Fm.m, atlas.dim
    if h > 3 * L / m:
        raise ValueError(f"grid step {h:g} is coarser than the band width 3L/m = {3 * L / m:g}")
    for r in regions:
        if r not in GAP_REGIONS:
            raise ValueError(f"unknown region {r!r}")
    width = width if width is not None else min(atlas.R / 4, hausdorff_bound(L, m) + 2 * h)
    idx, X, sd = _tube_grid(atlas, h, width)
    f = F.evaluate(X, sdist=sd)
    shift = float(np.max(np.abs(Fm.offsets)) + np.max(Fm.deviations))
    fm = np.full(len(X), np.inf)
    ft = np.full(len(X), -np.inf)
    near = np.isfinite(f) & (np.abs(f) <= shift * (1 + 1e-9) + 1e-12)
    fm[near] = Fm.evaluate(X[near], sdist=sd[near])
    ft[near] = Ft.evaluate(X[near], sdist=sd[near])
    # |F_m - F| <= shift wherever F is finite, so the far values only need their sign.
    far = np.isfinite(f) & ~near
    fm[far] = f[far]
    ft[far] = f[far]
    inW = np.isfinite(f)
    masks = {
        "outer": inW & (fm < 0) & (f >= 0),
        "inner": inW & (f < 0) & (ft >= 0),
        "outer_deficit": inW & (f < 0) & (fm >= 0),
        "inner_excess": inW & (ft < 0) & (f >= 0),
    }
    edge = np.abs(sd) > width - 2 * h
    out = {}
    for r in regions:
        mask = masks[r]
        if np.any(mask & edge):
            raise ArithmeticError(f"region {r} reaches the edge of the counting tube; widen it")
        cnt = int(mask.sum())
        out[r] = VolumeGap(r, cnt * h**n, _boundary_cells(idx, mask) * h**n, h, cnt)
    return out


def lebesgue_gap(triple, region: str, h: float) -> VolumeGap:
    return lebesgue_gaps(triple, h, (region,))[region]


# --- Sobolev errors -------------------------------------------------------------

def sobolev_error(psi, phi, k: int, p: float, weights) -> float:
    """``||psi - phi||_{W^{k,p}}`` by quadrature of grid values and derivatives.

    ``psi`` and ``phi`` are tuples ``(values, gradients, hessians)`` on the same nodes.
    """
    if k not in (1, 2):
        raise ValueError("order must be 1 or 2")
    w = np.asarray(weights, dtype=float)
    parts = []
    for o in range(k + 1):
        a = np.asarray(psi[o], dtype=float)
        b = np.asarray(phi[o], dtype=float)
        if a.shape != b.shape or len(a) != len(w):
            raise ValueError("grid mismatch between the two charts")
        parts.append(np.abs(a - b).reshape(len(w), -1))
    D = np.concatenate(parts, axis=1)
    return float(np.sum(w[:, None] * D**p) ** (1.0 / p))


def chart_sobolev_errors(charts, k: int, p: float) -> np.ndarray:
    """Per-chart ``W^{k,p}`` distance of extracted charts to the original charts."""
    out = []
    for c in charts:
        kk = c.nodes.shape[1]
        if len(c.nodes) > 1:
            h = np.min(np.diff(np.unique(c.nodes[:, 0])))
        else:
            h = 1.0
        w = np.full(len(c.nodes), h**kk)
        out.append(sobolev_error((c.values, c.grad, c.hess), c.base, k, p, w))
    return np.array(out)


def chart_sup_errors(charts) -> np.ndarray:
    return np.array([float(np.max(np.abs(c.values - c.base[0]))) for c in charts])


# --- characteristics -------------------------------------------------------------

def measure_characteristic(charts, atlas: Atlas):
    """``(L_m, R_m)`` from the extracted charts.

    ``L_m`` is the steepest sampled slope; ``R_m`` is the window radius ``R - 2 eps0``
    shrunk by ``(1 + L)/(1 + L_m)`` when the charts got steeper.
    """
    Lm = max(float(np.max(np.linalg.norm(c.grad, axis=1))) for c in charts)
    Rm = atlas.window * min(1.0, (1 + atlas.L) / (1 + Lm))
    return Lm, Rm


def diameter(points) -> float:
    """Largest distance between two points (over the convex hull)."""
    return point_diameter(points)


def boundary_distances(triple, m: float, exact_sample: Optional[SampledBoundary] = None):
    """Hausdorff distances of ``dOmega_m`` and ``domega_m`` to ``dOmega``.

    Returns ``(outer, inner, outer_sample, inner_sample, exact_sample)``.
    """
    Fm, F, Ft = triple
    atlas = F.atlas
    if exact_sample is None:
        exact_sample = sample_boundary(atlas, exact_solver(atlas), m)
    so = sample_boundary(atlas, root_solver(Fm), m)
    si = sample_boundary(atlas, root_solver(Ft), m)
    return hausdorff_boundaries(so, exact_sample), hausdorff_boundaries(si, exact_sample), so, si, exact_sample


# --- report -------------------------------------------------------------------------

@dataclass
class ConvergenceRow:
    m: float
    above_m0: bool
    hausdorff_outer: float
    hausdorff_inner: float
    hausdorff_error: float
    hausdorff: float
    hausdorff_bound: float
    chart_sup: float
    chart_sup_bound: float
    vertical_margin: float
    vertical_floor: float
    lebesgue_outer: Optional[float]
    lebesgue_inner: Optional[float]
    lebesgue_error: Optional[float]
    lebesgue_violation: Optional[float]
    w1p_errors: dict
    w2q_errors: dict
    diameter: float
    diameter_outer: float
    diameter_inner: float
    L_m: float
    R_m: float


@dataclass
class ConvergenceReport:
    shape: str
    L: float
    R: float
    eps0: float
    charts: int
    m0: Optional[float]
    chart_res: int
    vol_h: dict
    rows: list = field(default_factory=list)

    @property
    def m_values(self):
        return [r.m for r in self.rows]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constants"] = pinned_constants()
        return d

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def csv_columns(self):
        cols = ["m", "above_m0", "hausdorff_outer", "hausdorff_inner", "hausdorff_error", "hausdorff",
                "hausdorff_bound", "chart_sup", "chart_sup_bound", "vertical_margin", "vertical_floor",
                "lebesgue_outer", "lebesgue_inner", "lebesgue_error", "lebesgue_violation"]
        cols += [f"w1_{p}" for p in W1P_EXPONENTS] + [f"w2_{q}" for q in W2Q_EXPONENTS]
        cols += ["diameter", "diameter_outer", "diameter_inner", "L_m", "R_m"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_columns())
        for r in self.rows:
            d = asdict(r)
            row = [d[c] for c in self.csv_columns()[:15]]
            row += [d["w1p_errors"][str(p)] for p in W1P_EXPONENTS]
            row += [d["w2q_errors"][str(q)] for q in W2Q_EXPONENTS]
            row += [d[c] for c in ("diameter", "diameter_outer", "diameter_inner", "L_m", "R_m")]
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def evaluate_m(atlas: Atlas, m: float, partition: Optional[Partition] = None, chart_res: int = 33,
               vol_h: Optional[float] = None, m0: Optional[float] = None, exact_sample=None,
               keep_charts: bool = False):
    """All reported quantities at one ``m``; returns the row (and the charts if asked)."""
    part = partition or Partition(atlas)
    Fm, F, Ft = defining_triple(atlas, m, part)
    outer = extract_charts(Fm, res=chart_res)
    inner = extract_charts(Ft, res=chart_res)
    both = outer + inner
    L = atlas.L
    ho, hi, so, si, exact_sample = boundary_distances((Fm, F, Ft), m, exact_sample)
    if vol_h is not None:
        gaps = lebesgue_gaps((Fm, F, Ft), vol_h)
        leb = (gaps["outer"].value, gaps["inner"].value, max(gaps["outer"].error, gaps["inner"].error),
               gaps["outer_deficit"].value + gaps["inner_excess"].value)
    else:
        leb = (None, None, None, None)
    Lm, Rm = measure_characteristic(both, atlas)
    w1 = {str(p): float(np.max(chart_sobolev_errors(both, 1, p))) for p in W1P_EXPONENTS}
    w2 = {str(q): float(np.max(chart_sobolev_errors(both, 2, q))) for q in W2Q_EXPONENTS}
    row = ConvergenceRow(
        m=float(m), above_m0=bool(m0 is not None and m >= m0),
        hausdorff_outer=ho.value, hausdorff_inner=hi.value, hausdorff_error=ho.error + hi.error,
        hausdorff=ho.value + hi.value, hausdorff_bound=hausdorff_bound(L, m),
        chart_sup=float(np.max(chart_sup_errors(both))), chart_sup_bound=chart_sup_bound(L, m),
        vertical_margin=min(c.vertical_margin for c in both), vertical_floor=1 / (2 * math.sqrt(1 + L * L)),
        lebesgue_outer=leb[0], lebesgue_inner=leb[1], lebesgue_error=leb[2], lebesgue_violation=leb[3],
        w1p_errors=w1, w2q_errors=w2,
        diameter=diameter(exact_sample.points), diameter_outer=diameter(so.points),
        diameter_inner=diameter(si.points), L_m=Lm, R_m=Rm,
    )
    return (row, outer, inner) if keep_charts else row


def convergence_study(atlas: Atlas, ms: Sequence[float], partition: Optional[Partition] = None,
                      chart_res: int = 33, vol_res: Optional[float] = None, m0: Optional[float] = None,
                      on_charts=None) -> ConvergenceReport:
    """Rows of :func:`evaluate_m` over an increasing schedule.

    ``vol_res`` is the number of volume-grid steps per band width ``L/m``
    (no volume counts when ``None``).  ``on_charts(m, outer, inner)`` receives
    the extracted charts of each ``m``.
    """
    ms = [float(m) for m in ms]
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ValueError("m schedule must be strictly increasing")
    part = partition or Partition(atlas)
    vol_h = {str(m): (atlas.L / (vol_res * m) if vol_res else None) for m in ms}
    rep = ConvergenceReport(atlas.name, atlas.L, atlas.R, atlas.eps0, len(atlas), m0, chart_res, vol_h)
    for m in ms:
        ex = sample_boundary(atlas, exact_solver(atlas), m)
        row, outer, inner = evaluate_m(atlas, m, part, chart_res, vol_h[str(m)], m0, ex, keep_charts=True)
        rep.rows.append(row)
        if on_charts is not None:
            on_charts(m, outer, inner)
    return rep


def report_checks(rep: ConvergenceReport, tol: float = 1e-9) -> list:
    """Measured-vs-bound records for the invariants of the report."""
    checks = []
    L, R = rep.L, rep.R
    for r in rep.rows:
        tag = f"m={r.m:g}"
        checks.append(("hausdorff", tag, r.hausdorff, r.hausdorff_bound + r.hausdorff_error))
        checks.append(("chart_sup", tag, r.chart_sup, r.chart_sup_bound + tol))
        checks.append(("transversality", tag, -r.vertical_margin, -(r.vertical_floor - tol)))
        checks.append(("diameter", tag, max(r.diameter_outer, r.diameter_inner), DIAMETER_CONST * r.diameter))
        checks.append(("lipschitz", tag, r.L_m, LIPSCHITZ_CONST * (1 + L * L)))
        checks.append(("radius", tag, -r.R_m, -R / (RADIUS_CONST * (1 + L * L))))
        if r.lebesgue_violation is not None:
            checks.append(("sandwich_volume", tag, r.lebesgue_violation, 0.0))
    return checks
