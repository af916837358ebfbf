"""Acceptance suite.

One test per criterion; each prints a single PASS/FAIL line (also repeated in
the pytest terminal summary) and asserts the verdict at the stated tolerance.
Expensive objects (atlases, partitions, defining triples, extracted charts)
are cached for the whole module.
"""
import filecmp
import math
import os
import subprocess
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from _acceptance import record
from lipsmooth.capacity import (FAMILY, analytic_ball_capacity, approx_boundary, ball_capacity, estimate_K,
                                exact_boundary, isocap_compare, mazya_spot_check, r0)
from lipsmooth.curvature import bbb_violations, root_solver, surface_quadrature, weak_curvature
from lipsmooth.defining import (band_samples, classify, defining_triple, detect_m0, extract_charts,
                                sandwich_gaps, solve_roots)
from lipsmooth.geometry import make_shape
from lipsmooth.metrics import (boundary_distances, chart_sobolev_errors, chart_sup_bound, chart_sup_errors,
                               diameter, hausdorff_bound)
from lipsmooth.mollify import kernel_integral, mollifier_report
from lipsmooth.partition import Partition

SCHEDULE = (16, 32, 64, 128)
LADDER = (4, 8, 16, 32, 64, 128, 256, 512)

pytestmark = pytest.mark.acceptance


@lru_cache(maxsize=None)
def atlas(name):
    return make_shape(name)


@lru_cache(maxsize=None)
def partition(name):
    return Partition(atlas(name))


@lru_cache(maxsize=None)
def m0(name):
    return detect_m0(atlas(name), LADDER, partition(name))[0]


@lru_cache(maxsize=None)
def triple(name, m):
    return defining_triple(atlas(name), m, partition(name))


@lru_cache(maxsize=None)
def charts(name, m, res=33):
    Fm, _, Ft = triple(name, m)
    return extract_charts(Fm, res=res, strict=False), extract_charts(Ft, res=res, strict=False)


def floor(L):
    return 1.0 / (2 * math.sqrt(1 + L * L))


# --- 1: Hausdorff rate ---------------------------------------------------------------

def test_criterion_01_hausdorff_rate():
    ok, parts = True, []
    for name in ("disk", "square"):
        t0 = time.perf_counter()
        a = atlas(name)
        mz = m0(name)
        vals, sample = [], None
        for m in SCHEDULE:
            out, inn, _, _, sample = boundary_distances(triple(name, m), m, None)
            d = out.value + inn.value
            err = out.error + inn.error
            bound = hausdorff_bound(a.L, m)
            ok &= d <= bound + err
            vals.append(d)
        decay = [vals[i + 1] / vals[i] for i in range(len(vals) - 1)]
        secs = time.perf_counter() - t0
        ok &= max(decay) <= 0.7 and secs <= 120
        parts.append(f"{name}: m0={mz} d={'/'.join(f'{v:.3g}' for v in vals)} "
                     f"bound(128)={hausdorff_bound(a.L, 128):.3g} decay<={max(decay):.2f} {secs:.0f}s")
    assert record(1, "Hausdorff distance within 12L*sqrt(1+L^2)/m, decay <= 0.7, <= 2 min", ok, "; ".join(parts))


# --- 2: sandwich ---------------------------------------------------------------------

def test_criterion_02_sandwich():
    ok, parts = True, []
    for name in ("disk", "square"):
        a = atlas(name)
        m = m0(name)
        tr = triple(name, m)
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        pad = a.R / 32
        S = a.sample.points
        lo, hi = S.min(axis=0) - pad, S.max(axis=0) + pad
        # oversample a box around the boundary and keep the first 1e5 points of the cover W
        X = np.concatenate([band_samples(a, m, 50000, seed=8), rng.uniform(lo, hi, size=(80000, a.dim))])
        X = X[tr[1].partition.evaluate(X).in_cover][:100000]
        g = sandwich_gaps(tr, X)
        cl = classify(tr, X)
        inW = np.isfinite(g.weight)
        w = g.weight[inW]
        ok &= len(X) == 100000 and bool(np.all(inW))
        order_bad = int(np.sum((w > 0) & ((g.lower[inW] <= 0) | (g.upper[inW] <= 0))))
        V = cl.values[inW]
        flat_bad = int(np.sum((w == 0) & ~((V[:, 0] == V[:, 1]) & (V[:, 1] == V[:, 2]))))
        # sign containment: F~_m <= 0 => F <= 0 => F_m <= 0
        cont_bad = int(np.sum((V[:, 2] <= 0) & (V[:, 1] > 0)) + np.sum((V[:, 1] <= 0) & (V[:, 0] > 0)))
        secs = time.perf_counter() - t0
        ok &= order_bad == 0 and flat_bad == 0 and cont_bad == 0 and secs <= 30
        parts.append(f"{name} m={m}: {int(inW.sum())} pts in W, order violations {order_bad + flat_bad}, "
                     f"containment violations {cont_bad}, {secs:.1f}s")
    assert record(2, "sandwich F_m < F < F~_m and omega_m in Omega in Omega_m on 1e5 points, <= 30 s",
                  ok, "; ".join(parts))


# --- 3 and 4: extracted charts ------------------------------------------------------

def _chart_rows(name):
    a = atlas(name)
    mz = m0(name)
    ms = sorted(set(SCHEDULE) | {mz})
    rows = []
    for m in ms:
        out, inn = charts(name, m)
        both = out + inn
        rows.append((m, m >= mz, float(np.max(chart_sup_errors(both))), chart_sup_bound(a.L, m),
                     min(c.vertical_margin for c in both)))
    return a, mz, rows


def test_criterion_03_chart_sup():
    ok, parts = True, []
    for name in ("disk", "square"):
        a, mz, rows = _chart_rows(name)
        enforced = [r for r in rows if r[1]]
        ok &= bool(enforced) and all(r[2] <= r[3] + 1e-9 for r in enforced)
        parts.append(f"{name} (m0={mz}): " + ", ".join(
            f"m={m}{'' if e else '*'} {s:.3g}<={b:.3g}" for m, e, s, b, _ in rows))
    assert record(3, "chart sup error <= 6L*sqrt(1+L^2)/m for m >= m0 (* below m0, reported)",
                  ok, "; ".join(parts))


def test_criterion_04_transversality():
    ok, parts = True, []
    for name in ("disk", "square"):
        a, mz, rows = _chart_rows(name)
        fl = floor(a.L)
        enforced = [r for r in rows if r[1]]
        ok &= bool(enforced) and all(r[4] >= fl - 1e-9 for r in enforced)
        parts.append(f"{name} floor {fl:.4f}: " + ", ".join(
            f"m={m}{'' if e else '*'} {v:.4f}" for m, e, _, _, v in rows))
    assert record(4, "vertical derivative >= 1/(2 sqrt(1+L^2)) for m >= m0 (* below m0, reported)",
                  ok, "; ".join(parts))


# --- 5: mollifier ----------------------------------------------------------------------

# charts per shape (None = all); the 3D grids are coarser
MOLLIFIER_SUBSETS = {"disk": None, "square": None, "regular_polygon": None, "star": 64,
                     "sphere": 12, "cube": 12, "cylinder": 12}


def test_criterion_05_mollifier():
    ok, parts = True, []
    for k in (1, 2):
        for m in (4, 8, 16, 32, 64, 128):
            ok &= abs(kernel_integral(k, m) - 1) <= 1e-10
    for name, count in MOLLIFIER_SUBSETS.items():
        a = make_shape(name)
        ids = None if count is None else np.arange(0, len(a), len(a) // count)[:count]
        res = None if a.dim == 2 else 13
        worst_dev = worst_lip = 0.0
        for m in (4, 8, 16, 32, 64, 128):
            r = mollifier_report(a, m, res=res, ids=ids)
            ok &= abs(r["rule_sum"] - 1) <= 1e-10
            ok &= r["deviation"] <= r["deviation_bound"] * (1 + 1e-12)
            ok &= r["lipschitz"] <= a.L * (1 + 1e-9)
            worst_dev = max(worst_dev, r["deviation"] / r["deviation_bound"])
            worst_lip = max(worst_lip, r["lipschitz"] / a.L)
        n = len(a) if ids is None else len(ids)
        parts.append(f"{name}[{n}] dev/(L/m)<={worst_dev:.3f} lip/L<={worst_lip:.6f}")
    assert record(5, "mollifier mass 1, |M_m phi - phi| <= L/m, Lipschitz <= L, m in 4..128",
                  ok, "; ".join(parts))


# --- 6: curvature ------------------------------------------------------------------------

def _fd_roots(F, ids, Y, h=2e-5):
    # the oracle's truncation error is ~ h^2 |psi| / 6 with psi ~ m^3 here, so
    # h = 1e-4 alone costs ~1.4e-4 on the Hessian; 2e-5 keeps it near 6e-6
    k = Y.shape[1]
    rr = solve_roots(F, ids, Y)
    gfd = np.empty_like(rr.grad)
    hfd = np.empty_like(rr.hess)
    for d in range(k):
        e = np.zeros(k)
        e[d] = h
        p, q = solve_roots(F, ids, Y + e), solve_roots(F, ids, Y - e)
        gfd[:, d] = (p.values - q.values) / (2 * h)
        hfd[:, :, d] = (p.grad - q.grad) / (2 * h)
    return rr, gfd, hfd


def test_criterion_06_curvature():
    ok, parts = True, []
    err = 0.0
    for dim, name in ((2, "disk"), (3, "sphere")):
        for rho in ((0.5, 1.0, 2.0) if dim == 2 else (1.0, 2.0)):
            a = make_shape(name, radius=rho)
            ids = np.arange(0, len(a), max(1, len(a) // 16))
            Y = np.random.default_rng(1).uniform(-a.R / 2, a.R / 2, size=(len(ids), dim - 1))
            _, g, h = a.eval_charts(ids, Y, 2)
            want = (1 if dim == 2 else math.sqrt(2)) / rho
            err = max(err, float(np.max(np.abs(weak_curvature(g, h).norm - want))))
    ok &= err <= 1e-6
    parts.append(f"analytic |B| error {err:.2e}")

    viol = 0
    nodes = 0
    for name in ("disk", "star", "sphere"):
        a = atlas(name)
        ids = np.repeat(np.arange(len(a)), 9)
        Y = np.random.default_rng(2).uniform(-a.window, a.window, size=(len(ids), a.dim - 1)) / math.sqrt(a.dim - 1)
        _, g, h = a.eval_charts(ids, Y, 2)
        viol += bbb_violations(g, h, a.L)
        nodes += len(ids)
    ext = [c for side in charts("disk", 32) for c in side]
    G = np.concatenate([c.grad for c in ext])
    H = np.concatenate([c.hess for c in ext])
    Lm = max(atlas("disk").L, float(np.max(np.linalg.norm(G, axis=1))))
    viol += bbb_violations(G, H, Lm)
    nodes += len(G)
    ok &= viol == 0
    parts.append(f"BBB violations {viol}/{nodes}")

    a = atlas("disk")
    Fm = triple("disk", 32)[0]
    ids = np.arange(0, len(a), 8)
    Y = np.random.default_rng(3).uniform(-a.window / 2, a.window / 2, size=(len(ids), 1))
    rr, gfd, hfd = _fd_roots(Fm, ids, Y)
    ge = float(np.max(np.abs(rr.grad - gfd)))
    he = float(np.max(np.abs(rr.hess - hfd)))
    ok &= ge <= 1e-6 and he <= 1e-4
    parts.append(f"implicit vs FD (disk m=32): grad {ge:.1e}, hess {he:.1e}")
    assert record(6, "analytic curvature 1e-6, BBB sandwich at every node, implicit derivatives vs FD",
                  ok, "; ".join(parts))


# --- 7: disk curvature integral -----------------------------------------------------------

def test_criterion_07_curvature_integral():
    a = atlas("disk")
    errs, q2 = [], []
    for m in SCHEDULE:
        sq = surface_quadrature(a, partition("disk"), root_solver(triple("disk", m)[0]))
        errs.append(abs(sq.curvature_integral(1) - 2 * math.pi) / (2 * math.pi))
        q2.append(sq.curvature_integral(2))
    mono = all(errs[i + 1] <= 1.05 * errs[i] for i in range(len(errs) - 1))
    ok = errs[-1] <= 0.02 and mono
    assert record(7, "disk int |B| -> 2 pi: 2% at m=128, monotone within 5%", ok,
                  "rel err " + "/".join(f"{e:.2e}" for e in errs)
                  + "; q=2 integral " + "/".join(f"{v:.4f}" for v in q2) + f" (exact {2 * math.pi:.4f})")


# --- 8: Sobolev rates ---------------------------------------------------------------------

def test_criterion_08_sobolev():
    ok, parts = True, []
    for k, p in ((1, 2), (1, 4), (2, 1), (2, 2)):
        e = [float(np.max(chart_sobolev_errors(sum(charts("disk", m), []), k, p))) for m in (16, 128)]
        ok &= e[1] <= 0.5 * e[0]
        parts.append(f"W^{k},{p}: {e[0]:.3g}->{e[1]:.3g}")
    assert record(8, "disk W^{k,p} chart error(128) <= 0.5 error(16)", ok, "; ".join(parts))


# --- 9: capacity ----------------------------------------------------------------------------

def test_criterion_09_capacity():
    ok, parts = True, []
    for n, s, r, h, tol in ((2, 0.25, 1.0, 1 / 256, 0.02), (3, 0.5, 1.0, 1 / 96, 0.03)):
        t0 = time.perf_counter()
        v = ball_capacity(n, s, r, h).value
        secs = time.perf_counter() - t0
        exact = analytic_ball_capacity(n, s, r)
        rel = (v - exact) / exact
        ok &= abs(rel) <= tol and secs <= 120
        parts.append(f"n={n}: {v:.4f} vs {exact:.4f} ({100 * rel:+.2f}%, {secs:.0f}s)")
    assert record(9, "ball capacities within 2% (n=2) and 3% (n=3), <= 2 min each", ok, "; ".join(parts))


# --- 10: isocapacitary ---------------------------------------------------------------------

def test_criterion_10_isocapacitary():
    ok, parts = True, []
    a = atlas("disk")
    rr = r0(a)
    rep = exact_boundary(a, partition("disk"))
    cid = np.arange(0, len(a), len(a) // 8)
    C = rep.points(cid)

    fams = ((0.25,), (0.125, 0.25), FAMILY)
    K = [estimate_K(rep, rr / 2, C, f).value for f in fams]
    mono = all(K[i] <= K[i + 1] * (1 + 1e-12) for i in range(len(K) - 1))
    ok &= mono
    parts.append("refinement K " + "<=".join(f"{v:.3e}" for v in K))

    K2r = estimate_K(rep, rr, C).value
    Km = []
    for m in SCHEDULE:
        repm = approx_boundary(triple("disk", m)[0])
        Km.append(estimate_K(repm, rr / 2, repm.points(cid)).value)
    ok &= max(Km) <= 3 * K2r
    parts.append(f"max_m K_m(r0/2)={max(Km):.3e} <= 3 K(r0)={3 * K2r:.3e}")

    for name in ("disk", "star"):
        b = atlas(name)
        rb = exact_boundary(b, partition(name))
        mc = mazya_spot_check(rb, rb.points([0])[0], r0(b) / 2)
        ok &= mc.ok
        parts.append(f"Maz'ya {name}: Q={mc.Q:.3e} Rq={mc.Rq:.3e}")

    rows, k = isocap_compare(rep, approx_boundary(triple("disk", 16)[0]), [rr / 2], 16, C,
                             approx_boundary(triple("disk", 16)[0]).points(cid), diameter(a.sample.points))
    verdict = all(math.isfinite(x.K_m) and math.isfinite(x.rhs) for x in rows)
    ok &= verdict
    parts.append(f"pinned c=2: c_hat={k['c_hat']:.3g}, holds={rows[0].holds}, chain={rows[0].holds_chain}")
    assert record(10, "isocapacitary: refinement monotone, K_m(r) <= 3 K(2r), Maz'ya within 5%, pinned verdict",
                  ok, "; ".join(parts))


# --- 11: determinism -------------------------------------------------------------------------

def test_criterion_11_determinism(tmp_path):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cmd = [sys.executable, "-m", "lipsmooth.cli", "approximate", "--shape", "disk", "--m", "32",
               "--chart-res", "9", "--no-m0", "--out", str(out)]
        env = dict(os.environ, LIPSMOOTH_THREADS="1")
        subprocess.run(cmd, check=True, capture_output=True, env=env)
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".json"))
    match, diff, errors = filecmp.cmpfiles(outs[0], outs[1], names, shallow=False)
    ok = bool(names) and not diff and not errors
    assert record(11, "two identical CLI runs give byte-identical CSV/JSON", ok,
                  f"{len(match)} files identical, {len(diff)} differ")
