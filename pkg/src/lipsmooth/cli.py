"""Command line driver: ``lipsmooth approximate | verify | capacity``."""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from . import metrics
from .capacity import (FAMILY, analytic_ball_capacity, approx_boundary, ball_capacity, estimate_K,
                       exact_boundary, isocap_compare, r0)
from .curvature import bbb_violations, root_solver, surface_quadrature
from .defining import (band_samples, classify, defining_triple, detect_m0, hausdorff_band_check,
                       sandwich_gaps)
from .domain_file import DomainFileError, load_domain
from .expr import ExpressionError
from .geometry import SHAPES, GeometryError, make_shape
from .mollify import mollifier_report
from .partition import Partition

SUITES = ("mollifier", "sandwich", "band", "hausdorff", "chart_sup", "transversality", "sobolev",
          "characteristic", "diameter", "curvature", "artifacts")
SMOOTH_SHAPES = ("disk", "sphere", "star")
DEFAULT_M = (16, 32, 64, 128)


class UsageError(Exception):
    pass


# --- configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    shape: Optional[str] = None
    spec: Optional[str] = None
    params: dict = field(default_factory=dict)
    m: tuple = DEFAULT_M
    chart_res: int = 33
    vol_res: Optional[int] = None
    cap_res: int = 128
    eps0: Optional[float] = None
    out: Optional[str] = None
    only: Optional[tuple] = None
    samples: int = 100000
    seed: int = 0
    detect_m0: bool = True
    r: Optional[tuple] = None

    def validate(self):
        if (self.shape is None) == (self.spec is None):
            raise UsageError("give exactly one of --shape or --spec")
        if self.shape is not None and self.shape not in SHAPES:
            raise UsageError(f"unknown shape {self.shape!r} (choose from {', '.join(SHAPES)})")
        if not self.m or any(b <= a for a, b in zip(self.m, self.m[1:])):
            raise UsageError("--m must be a strictly increasing list")
        if any(v <= 0 for v in self.m):
            raise UsageError("--m values must be positive")
        for name in ("chart_res", "cap_res", "samples"):
            if getattr(self, name) <= 0:
                raise UsageError(f"--{name.replace('_', '-')} must be positive")
        if self.vol_res is not None and self.vol_res <= 0:
            raise UsageError("--vol-res must be positive")
        if self.only:
            bad = [s for s in self.only if s not in SUITES]
            if bad:
                raise UsageError(f"unknown suite(s) {', '.join(bad)} (choose from {', '.join(SUITES)})")

    def describe(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d["m"] = [float(v) for v in self.m]
        d["only"] = list(self.only) if self.only else None
        d["r"] = list(self.r) if self.r else None
        return d


def _number_list(text: str, kind=float) -> tuple:
    try:
        return tuple(kind(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")


def _param(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    for conv in (int, float):
        try:
            return k, conv(v)
        except ValueError:
            pass
    return k, v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipsmooth", description="Smooth inner/outer approximation of Lipschitz domains.")
    p.add_argument("--version", action="version", version=f"lipsmooth {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--shape", help=f"library shape ({', '.join(SHAPES)})")
    src.add_argument("--spec", help="domain file with explicit charts")
    common.add_argument("--param", action="append", type=_param, default=[], metavar="KEY=VALUE",
                        help="shape parameter (repeatable)")
    common.add_argument("--m", type=_number_list, default=DEFAULT_M, help="comma-separated m schedule")
    common.add_argument("--chart-res", type=int, default=33, help="chart grid nodes per axis")
    common.add_argument("--vol-res", type=int, default=None, help="volume grid steps per L/m (off by default)")
    common.add_argument("--cap-res", type=int, default=128, help="capacity grid steps per ball radius")
    common.add_argument("--eps0", type=float, default=None, help="override the margin eps0")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("--no-m0", action="store_true", help="skip m0 detection (enforce bounds at every m)")
    sub.add_parser("approximate", parents=[common], help="extract charts and write the convergence report")
    v = sub.add_parser("verify", parents=[common], help="run verification suites")
    v.add_argument("--only", type=lambda s: tuple(x for x in s.split(",") if x), default=None,
                   help=f"comma-separated suites ({', '.join(SUITES)})")
    v.add_argument("--artifacts", default=None, help="directory written by 'approximate' to check")
    v.add_argument("--samples", type=int, default=100000, help="random points for the sandwich suite")
    v.add_argument("--seed", type=int, default=0)
    c = sub.add_parser("capacity", parents=[common], help="isocapacitary tables")
    c.add_argument("--r", type=_number_list, default=None, help="comma-separated radii (default r0/8..r0)")
    c.add_argument("--self-test", action="store_true", help="concentric-ball capacities against closed forms")
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig(shape=args.shape, spec=args.spec, params=dict(args.param), m=tuple(float(v) for v in args.m),
                    chart_res=args.chart_res, vol_res=args.vol_res, cap_res=args.cap_res, eps0=args.eps0,
                    out=args.out, detect_m0=not args.no_m0)
    if getattr(args, "only", None):
        cfg.only = args.only
    if getattr(args, "samples", None):
        cfg.samples = args.samples
        cfg.seed = args.seed
    if getattr(args, "r", None):
        cfg.r = args.r
    return cfg


def load_atlas(cfg: RunConfig):
    if cfg.spec:
        atlas = load_domain(cfg.spec)
        if cfg.eps0 is not None:
            from .geometry import Atlas
            atlas = Atlas(atlas.body, atlas.characteristic, atlas.charts, atlas.centers, cfg.eps0, atlas.sample,
                          atlas.name, atlas.params)
        return atlas
    params = dict(cfg.params)
    if cfg.eps0 is not None:
        params["eps0"] = cfg.eps0
    return make_shape(cfg.shape, **params)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("LIPSMOOTH_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    n = min(threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# --- output helpers ----------------------------------------------------------------

def _clean(obj):
    return metrics._clean(obj)


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def chart_set_name(m: float, side: str) -> str:
    return f"charts_m{m:g}_{side}"


def write_chart_set(out: str, m: float, side: str, charts, atlas):
    """Raw little-endian float64 blocks plus a JSON header describing them."""
    k = atlas.dim - 1
    blocks = {
        "values": np.stack([c.values for c in charts]),
        "grad": np.stack([c.grad for c in charts]),
        "hess": np.stack([c.hess for c in charts]),
        "vertical": np.stack([c.vertical for c in charts]),
    }
    raw = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks.values())
    name = chart_set_name(m, side)
    with open(os.path.join(out, name + ".bin"), "wb") as fh:
        fh.write(raw)
    layout, offset = [], 0
    for key, b in blocks.items():
        layout.append({"field": key, "shape": list(b.shape), "offset": offset})
        offset += b.size * 8
    header = {
        "m": float(m), "side": side, "dtype": "<f8", "charts": [int(c.index) for c in charts],
        "nodes": charts[0].nodes.tolist(), "window": float(charts[0].window), "dim": atlas.dim,
        "tangential_dim": k, "layout": layout, "bytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest(),
    }
    _write(os.path.join(out, name + ".json"), dumps(header))


def read_chart_set(out: str, m: float, side: str):
    name = chart_set_name(m, side)
    with open(os.path.join(out, name + ".json"), encoding="utf-8") as fh:
        header = json.load(fh)
    with open(os.path.join(out, name + ".bin"), "rb") as fh:
        raw = fh.read()
    fields = {}
    for item in header["layout"]:
        n = int(np.prod(item["shape"]))
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=item["offset"]) if len(raw) >= item["offset"] + 8 * n \
            else np.full(n, np.nan)
        fields[item["field"]] = a.reshape(item["shape"])
    return header, raw, fields


# --- m0 --------------------------------------------------------------------------

def find_m0(atlas, part, cfg: RunConfig):
    if not cfg.detect_m0:
        return None, []
    ladder = sorted(set([4, 8, 16, 32, 64, 128, 256, 512] + [float(v) for v in cfg.m]))
    m0, log = detect_m0(atlas, ladder, part)
    return m0, [{"m": float(r.m), "ok": r.ok, "roots_found": r.roots_found,
                 "vertical_margin": r.vertical_margin, "reason": r.reason,
                 "band_violations": None if r.band is None else r.band.violations} for r in log]


def enforced(m: float, m0) -> bool:
    return m0 is None or m >= m0


# --- approximate -------------------------------------------------------------------

def cmd_approximate(cfg: RunConfig) -> int:
    if not cfg.out:
        raise UsageError("approximate needs --out")
    os.makedirs(cfg.out, exist_ok=True)
    atlas = load_atlas(cfg)
    part = Partition(atlas)
    m0, log = find_m0(atlas, part, cfg)
    _write(os.path.join(cfg.out, "m0.json"), dumps({"m0": m0, "log": log}))
    failures = {}
    saved = {}

    def one(m):
        try:
            vol_h = atlas.L / (cfg.vol_res * m) if cfg.vol_res else None
            return m, metrics.evaluate_m(atlas, m, part, cfg.chart_res, vol_h, m0, keep_charts=True), None
        except (GeometryError, ArithmeticError) as exc:
            return m, None, str(exc)

    rep = metrics.ConvergenceReport(atlas.name, atlas.L, atlas.R, atlas.eps0, len(atlas), m0, cfg.chart_res,
                                    {str(m): (atlas.L / (cfg.vol_res * m) if cfg.vol_res else None) for m in cfg.m})
    for m, res, err in _pmap(one, cfg.m):
        if err is not None:
            failures[str(m)] = err
            continue
        row, outer, inner = res
        rep.rows.append(row)
        write_chart_set(cfg.out, m, "outer", outer, atlas)
        write_chart_set(cfg.out, m, "inner", inner, atlas)
        saved[str(m)] = [chart_set_name(m, "outer"), chart_set_name(m, "inner")]
    _write(os.path.join(cfg.out, "report.csv"), rep.to_csv())
    doc = {"config": cfg.describe(), "version": __version__, "report": rep.to_dict(), "m0": m0,
           "failures": failures, "chart_sets": saved}
    _write(os.path.join(cfg.out, "report.json"), dumps(doc))
    summary = {"command": "approximate", "m0": m0, "rows": len(rep.rows), "failures": failures, "out": cfg.out}
    return 0, summary


# --- verify ----------------------------------------------------------------------------

@dataclass
class Check:
    suite: str
    name: str
    measured: float
    bound: float
    passed: bool
    enforced: bool = True
    note: str = ""


def _le(suite, name, measured, bound, enf=True, note="") -> Check:
    ok = bool(np.isfinite(measured) and measured <= bound)
    return Check(suite, name, float(measured), float(bound), ok, enf, note)


def _suite_mollifier(atlas, cfg, ctx):
    out = []
    for m in cfg.m:
        r = mollifier_report(atlas, m)
        tag = f"m={m:g}"
        out.append(_le("mollifier", f"kernel_integral:{tag}", abs(r["kernel_integral"] - 1), 1e-10))
        out.append(_le("mollifier", f"rule_sum:{tag}", abs(r["rule_sum"] - 1), 1e-10))
        out.append(_le("mollifier", f"deviation:{tag}", r["deviation"], r["deviation_bound"]))
        out.append(_le("mollifier", f"lipschitz:{tag}", r["lipschitz"], atlas.L * (1 + 1e-9)))
    return out


def _suite_sandwich(atlas, cfg, ctx):
    out = []
    rng = np.random.default_rng(cfg.seed)
    lo, hi = atlas.bounding_box(atlas.R / 4)
    for m in cfg.m:
        enf = enforced(m, ctx["m0"])
        try:
            triple = defining_triple(atlas, m, ctx["part"])
        except GeometryError as exc:
            out.append(Check("sandwich", f"m={m:g}", math.nan, 0, False, enf, str(exc)))
            continue
        # half the points uniform in the box, half in a tube around the boundary
        n = cfg.samples
        X = np.concatenate([rng.uniform(lo, hi, (n - n // 2, atlas.dim)),
                            band_samples(atlas, m, n // 2, cfg.seed + 1)])
        v = classify(triple, X).values
        gaps = sandwich_gaps(triple, X)
        ok = np.all(np.isfinite(v), axis=1)
        w = gaps.weight
        lo, hi = gaps.lower, gaps.upper
        # where no chart bump is active the three functions coincide (all equal -xi_0)
        same = (v[:, 0] == v[:, 1]) & (v[:, 1] == v[:, 2])
        order_bad = int(np.sum(ok & (w > 0) & ~((lo > 0) & (hi > 0)))) + int(np.sum(ok & (w == 0) & ~same))
        cap = 3 * atlas.L / m * w * (1 + 1e-9)
        size_bad = int(np.sum(ok & (w > 0) & ((lo > cap) | (hi > cap))))
        cont_bad = int(np.sum(ok & (((v[:, 2] < 0) & (v[:, 1] >= 0)) | ((v[:, 1] < 0) & (v[:, 0] >= 0)))))
        out.append(_le("sandwich", f"order:m={m:g}", order_bad, 0, enf))
        out.append(_le("sandwich", f"gap_size:m={m:g}", size_bad, 0, enf))
        out.append(_le("sandwich", f"containment:m={m:g}", cont_bad, 0, enf))
    return out


def _suite_band(atlas, cfg, ctx):
    out = []
    for m in cfg.m:
        try:
            F = defining_triple(atlas, m, ctx["part"])[1]
            rep = hausdorff_band_check(F, m)
            out.append(_le("band", f"m={m:g}", rep.violations, 0, enforced(m, ctx["m0"])))
        except GeometryError as exc:
            out.append(Check("band", f"m={m:g}", math.nan, 0, False, enforced(m, ctx["m0"]), str(exc)))
    return out


def _report(atlas, cfg, ctx):
    if "report" not in ctx:
        rows, fails = [], {}
        for m in cfg.m:
            try:
                vol_h = atlas.L / (cfg.vol_res * m) if cfg.vol_res else None
                rows.append(metrics.evaluate_m(atlas, m, ctx["part"], cfg.chart_res, vol_h, ctx["m0"]))
            except (GeometryError, ArithmeticError) as exc:
                fails[m] = str(exc)
        ctx["report"] = (rows, fails)
    return ctx["report"]


def _row_checks(atlas, cfg, ctx, suite):
    rows, fails = _report(atlas, cfg, ctx)
    L, R = atlas.L, atlas.R
    out = []
    for m, msg in fails.items():
        out.append(Check(suite, f"m={m:g}", math.nan, math.nan, False, enforced(m, ctx["m0"]), msg))
    for r in rows:
        tag, enf = f"m={r.m:g}", enforced(r.m, ctx["m0"])
        if suite == "hausdorff":
            out.append(_le(suite, tag, r.hausdorff, r.hausdorff_bound + r.hausdorff_error, enf))
        elif suite == "chart_sup":
            out.append(_le(suite, tag, r.chart_sup, r.chart_sup_bound + 1e-9, enf))
        elif suite == "transversality":
            out.append(_le(suite, tag, -r.vertical_margin, -(r.vertical_floor - 1e-9), enf,
                           "measured/bound are negated margins"))
        elif suite == "characteristic":
            out.append(_le(suite, f"L_m:{tag}", r.L_m, metrics.LIPSCHITZ_CONST * (1 + L * L), enf))
            out.append(_le(suite, f"R_m:{tag}", -r.R_m, -R / (metrics.RADIUS_CONST * (1 + L * L)), enf,
                           "measured/bound are negated radii"))
        elif suite == "diameter":
            out.append(_le(suite, tag, max(r.diameter_outer, r.diameter_inner),
                           metrics.DIAMETER_CONST * r.diameter, enf))
    if suite == "hausdorff" and len(rows) > 1:
        for a, b in zip(rows, rows[1:]):
            if b.m == 2 * a.m and enforced(a.m, ctx["m0"]):
                out.append(_le(suite, f"decay:m={a.m:g}->{b.m:g}", b.hausdorff / a.hausdorff, 0.7))
    if suite == "sobolev" and len(rows) > 1:
        first, last = rows[0], rows[-1]
        for key, errs in (("w1", "w1p_errors"), ("w2", "w2q_errors")):
            for p, e0 in getattr(first, errs).items():
                e1 = getattr(last, errs)[p]
                out.append(_le(suite, f"{key}_{p}:m={first.m:g}->{last.m:g}", e1, 0.5 * e0))
    return out


def _suite_curvature(atlas, cfg, ctx):
    out = []
    if atlas.dim != 2:
        return out
    part = ctx["part"]
    vals = []
    for m in cfg.m:
        try:
            Fm = defining_triple(atlas, m, part)[0]
            sq = surface_quadrature(atlas, part, root_solver(Fm), res=65)
        except (GeometryError, ArithmeticError) as exc:
            out.append(Check("curvature", f"m={m:g}", math.nan, 0, False, enforced(m, ctx["m0"]), str(exc)))
            continue
        slope = max(atlas.L, float(np.max(np.linalg.norm(sq.grad, axis=1))))
        out.append(_le("curvature", f"bbb:m={m:g}", bbb_violations(sq.grad, sq.hess, slope), 0))
        vals.append((m, sq.curvature_integral(1.0)))
    if atlas.name == "disk":
        target = 2 * math.pi
        for m, v in vals:
            out.append(_le("curvature", f"integral:m={m:g}", abs(v - target) / target, 0.02,
                           enforced(m, ctx["m0"]), f"value {v!r}"))
    return out


def _suite_artifacts(atlas, cfg, ctx):
    d = ctx.get("artifacts")
    out = []
    if not d:
        return out
    path = os.path.join(d, "report.json")
    if not os.path.exists(path):
        raise UsageError(f"no report.json in {d}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    floor = 1 / (2 * math.sqrt(1 + atlas.L**2))
    for mkey, names in sorted(doc.get("chart_sets", {}).items(), key=lambda kv: float(kv[0])):
        m = float(mkey)
        enf = enforced(m, ctx["m0"])
        for side in ("outer", "inner"):
            tag = f"{side}:m={m:g}"
            try:
                header, raw, fields = read_chart_set(d, m, side)
            except (OSError, ValueError, KeyError) as exc:
                out.append(Check("artifacts", f"readable:{tag}", math.nan, 0, False, True, str(exc)))
                continue
            good = hashlib.sha256(raw).hexdigest() == header["sha256"]
            out.append(Check("artifacts", f"integrity:{tag}", 0.0 if good else 1.0, 0.0, good))
            nodes = np.asarray(header["nodes"], dtype=float)
            ids = np.asarray(header["charts"])
            base = atlas.eval_charts(np.repeat(ids, len(nodes)), np.tile(nodes, (len(ids), 1)))[0]
            sup = float(np.max(np.abs(fields["values"].ravel() - base)))
            out.append(_le("artifacts", f"chart_sup:{tag}", sup, metrics.chart_sup_bound(atlas.L, m) + 1e-9, enf))
            out.append(_le("artifacts", f"transversality:{tag}", -float(np.min(fields["vertical"])),
                           -(floor - 1e-9), enf))
    return out


def cmd_verify(cfg: RunConfig, artifacts: Optional[str] = None):
    atlas = load_atlas(cfg)
    part = Partition(atlas)
    m0, log = find_m0(atlas, part, cfg)
    ctx = {"part": part, "m0": m0, "artifacts": artifacts}
    suites = cfg.only or tuple(s for s in SUITES if s != "artifacts" or artifacts)
    checks = []
    for s in suites:
        if s == "mollifier":
            checks += _suite_mollifier(atlas, cfg, ctx)
        elif s == "sandwich":
            checks += _suite_sandwich(atlas, cfg, ctx)
        elif s == "band":
            checks += _suite_band(atlas, cfg, ctx)
        elif s == "curvature":
            checks += _suite_curvature(atlas, cfg, ctx)
        elif s == "artifacts":
            if not artifacts:
                raise UsageError("the artifacts suite needs --artifacts DIR")
            checks += _suite_artifacts(atlas, cfg, ctx)
        else:
            checks += _row_checks(atlas, cfg, ctx, s)
    failed = [c for c in checks if c.enforced and not c.passed]
    doc = {"config": cfg.describe(), "version": __version__, "m0": m0, "m0_log": log,
           "constants": metrics.pinned_constants(), "suites": list(suites),
           "checks": [asdict(c) for c in checks], "passed": not failed}
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        _write(os.path.join(cfg.out, "verify.json"), dumps(doc))
    return (0 if not failed else 1), doc


# --- capacity ----------------------------------------------------------------------------

def cmd_capacity(cfg: RunConfig, self_test: bool = False):
    if self_test:
        rows = []
        for n, s, h, tol in ((2, 0.25, 1.0 / max(cfg.cap_res, 64), 0.02), (3, 0.5, 1.0 / max(min(cfg.cap_res, 96), 64), 0.03)):
            num = ball_capacity(n, s, 1.0, h).value
            ana = analytic_ball_capacity(n, s, 1.0)
            rows.append({"n": n, "inner": s, "outer": 1.0, "h": h, "numeric": num, "analytic": ana,
                         "relative_error": num / ana - 1, "tolerance": tol, "passed": abs(num / ana - 1) <= tol})
        doc = {"command": "capacity", "self_test": rows}
        if cfg.out:
            os.makedirs(cfg.out, exist_ok=True)
            _write(os.path.join(cfg.out, "capacity_selftest.json"), dumps(doc))
        return (0 if all(r["passed"] for r in rows) else 1), doc
    if cfg.shape is not None and cfg.shape not in SMOOTH_SHAPES:
        raise UsageError(f"shape {cfg.shape!r} has corners: its boundary is not W^2,1, so the "
                         "curvature-weighted isocapacitary function is not defined")
    atlas = load_atlas(cfg)
    part = Partition(atlas)
    rr0 = r0(atlas)
    rs = cfg.r or tuple(rr0 * f for f in (1 / 8, 1 / 4, 1 / 2, 1))
    for r in rs:
        if r > rr0 * (1 + 1e-12):
            raise UsageError(f"r = {r:g} exceeds r0 = {rr0:g}")
    step = max(1, len(atlas) // 16)
    ids = np.arange(0, len(atlas), step)
    rep = exact_boundary(atlas, part)
    centers = rep.points(ids)
    diam = metrics.diameter(atlas.sample.points)
    rows = []
    consts = None
    for r in rs:
        K = estimate_K(rep, r, centers, FAMILY, cfg.cap_res)
        rows.append({"r": r, "K_omega": K.value, "argmax_sigma": K.argmax[1]})
    comps = []
    for m in cfg.m:
        try:
            Fm = defining_triple(atlas, m, part)[0]
        except GeometryError as exc:
            comps.append({"m": m, "error": str(exc)})
            continue
        rep_m = approx_boundary(Fm)
        cm = rep_m.points(ids)
        res, consts = isocap_compare(rep, rep_m, rs, m, centers, cm, diam, FAMILY, cfg.cap_res)
        comps += [asdict(c) for c in res]
    doc = {"command": "capacity", "config": cfg.describe(), "r0": rr0, "C_n": 16.0, "family": list(FAMILY),
           "K_table": rows, "comparison": comps, "constants": consts}
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        _write(os.path.join(cfg.out, "capacity.json"), dumps(doc))
        lines = ["m,r,K_m,K_arg,K_omega,rhs,rhs_chain,holds,holds_chain"]
        for c in comps:
            if "error" in c:
                continue
            lines.append(",".join(metrics._fmt(c[k]) for k in
                                  ("m", "r", "K_m", "K_arg", "K_omega", "rhs", "rhs_chain", "holds", "holds_chain")))
        _write(os.path.join(cfg.out, "capacity.csv"), "\n".join(lines) + "\n")
    return 0, doc


# --- entry point ---------------------------------------------------------------------------

def _print_summary(command: str, doc: dict, as_json: bool):
    if as_json:
        sys.stdout.write(dumps(doc))
        return
    if command == "verify":
        for c in doc["checks"]:
            state = "PASS" if c["passed"] else ("FAIL" if c["enforced"] else "info")
            print(f"{state:4s} {c['suite']:14s} {c['name']:32s} measured={c['measured']:.6g} bound={c['bound']:.6g}")
        print("verify:", "passed" if doc["passed"] else "FAILED", f"(m0 = {doc['m0']})")
    elif command == "capacity" and "self_test" in doc:
        for r in doc["self_test"]:
            print(f"n={r['n']} numeric={r['numeric']:.6f} analytic={r['analytic']:.6f} "
                  f"error={100 * r['relative_error']:+.3f}% {'PASS' if r['passed'] else 'FAIL'}")
    elif command == "capacity":
        print(f"r0 = {doc['r0']:.6g}")
        for r in doc["K_table"]:
            print(f"r={r['r']:.6g} K_omega={r['K_omega']:.6g}")
        for c in doc["comparison"]:
            if "error" in c:
                print(f"m={c['m']:g}: {c['error']}")
            else:
                print(f"m={c['m']:g} r={c['r']:.6g} K_m={c['K_m']:.6g} rhs={c['rhs']:.6g} "
                      f"holds={c['holds']} chain={c['rhs_chain']:.6g} holds_chain={c['holds_chain']}")
    else:
        print(json.dumps(_clean(doc), sort_keys=True))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = config_from_args(args)
        cfg.validate()
        if args.command == "approximate":
            code, doc = cmd_approximate(cfg)
        elif args.command == "verify":
            code, doc = cmd_verify(cfg, args.artifacts)
        else:
            code, doc = cmd_capacity(cfg, args.self_test)
    except (UsageError, DomainFileError, ExpressionError) as exc:
        print(f"lipsmooth: error: {exc}", file=sys.stderr)
        return 2
    except (GeometryError, ValueError) as exc:
        print(f"lipsmooth: error: {exc}", file=sys.stderr)
        return 2
    _print_summary(args.command, doc, args.json)
    return code


if __name__ == "__main__":
    sys.exit(main())
