"""Text format for domains given by explicit charts.

One directive per line; ``#`` starts a comment::

    dim 2
    characteristic L=1 R=0.5 eps0=0.0625
    chart rotation=0.7071,-0.7071,0.7071,0.7071 base=1,1 radius=0.5 expr="-abs(y1)"
    chart rotation=1,0,0,1 base=0,1 radius=0.5 shape=square

A chart is either an expression in ``y1 .. y{n-1}`` or the graph of a library
shape seen in the given frame.  A file holding only ``shape <id> key=value ...``
stands for the library atlas itself.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .expr import Expression
from .geometry import (SHAPES, Atlas, Characteristic, Chart, ChartUnionBody, ConvexBody, ExitHeightFunction,
                       ExpressionFunction, Frame, GeometryError, check_atlas_lipschitz, make_shape)

_TOKEN = re.compile(r'[^\s=]+="[^"]*"|[^\s=]+=\S*|"[^"]*"|\S+')


class DomainFileError(ValueError):
    """Malformed domain file, with a 1-based line and column."""

    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass
class _Tok:
    key: Optional[str]
    value: str
    col: int       # column of the token
    vcol: int      # column of the value


def _tokens(text: str):
    out = []
    for mt in _TOKEN.finditer(text):
        s, c = mt.group(0), mt.start() + 1
        if "=" in s and not s.startswith('"'):
            k, v = s.split("=", 1)
            vc = c + len(k) + 1
            if v.startswith('"'):
                v, vc = v[1:-1], vc + 1
            out.append(_Tok(k, v, c, vc))
        else:
            out.append(_Tok(None, s.strip('"'), c, c))
    return out


def _floats(tok: _Tok, line: int, count: Optional[int] = None):
    try:
        vals = [float(x) for x in tok.value.split(",")]
    except ValueError:
        raise DomainFileError(f"{tok.key}: expected comma-separated numbers, got {tok.value!r}", line, tok.vcol)
    if count is not None and len(vals) != count:
        raise DomainFileError(f"{tok.key}: expected {count} numbers, got {len(vals)}", line, tok.vcol)
    if not all(math.isfinite(v) for v in vals):
        raise DomainFileError(f"{tok.key}: non-finite number", line, tok.vcol)
    return vals


def _literal(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def parse_domain(text: str, name: str = "domain") -> Atlas:
    """Build an atlas from the text of a domain file."""
    dim = None
    L = R = eps0 = None
    shape = None
    records = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0]
        toks = _tokens(body)
        if not toks:
            continue
        head = toks[0]
        if head.key is not None:
            raise DomainFileError(f"expected a directive, got {head.key}=", lineno, head.col)
        word, args = head.value, toks[1:]
        if word == "dim":
            if len(args) != 1 or args[0].key is not None or args[0].value not in ("2", "3"):
                raise DomainFileError("dim takes one value, 2 or 3", lineno, head.col)
            dim = int(args[0].value)
        elif word == "characteristic":
            for a in args:
                if a.key not in ("L", "R", "eps0"):
                    raise DomainFileError(f"unknown characteristic field {a.key or a.value!r}", lineno, a.col)
                v = _floats(a, lineno, 1)[0]
                if a.key == "L":
                    L = v
                elif a.key == "R":
                    R = v
                else:
                    eps0 = v
        elif word == "shape":
            if not args or args[0].key is not None:
                raise DomainFileError("shape needs a shape id", lineno, head.col)
            if args[0].value not in SHAPES:
                raise DomainFileError(f"unknown shape id {args[0].value!r}", lineno, args[0].col)
            params = {}
            for a in args[1:]:
                if a.key is None:
                    raise DomainFileError(f"expected key=value, got {a.value!r}", lineno, a.col)
                params[a.key] = _literal(a.value)
            shape = (args[0].value, params, lineno)
        elif word == "chart":
            records.append((lineno, args))
        else:
            raise DomainFileError(f"unknown directive {word!r}", lineno, head.col)
    if not records:
        if shape is None:
            raise DomainFileError("no charts and no shape given", 1, 1)
        sid, params, ln = shape
        if eps0 is not None:
            params.setdefault("eps0", eps0)
        try:
            return make_shape(sid, **params)
        except GeometryError as exc:
            raise DomainFileError(str(exc), ln, 1)
    if dim is None:
        raise DomainFileError("charts need a preceding 'dim' directive", records[0][0], 1)
    if L is None or R is None:
        raise DomainFileError("charts need 'characteristic L=... R=...'", records[0][0], 1)
    lib = {}
    charts = []
    for lineno, args in records:
        fields = {}
        for a in args:
            if a.key not in ("rotation", "base", "radius", "expr", "shape"):
                raise DomainFileError(f"unknown chart field {a.key or a.value!r}", lineno, a.col)
            if a.key in fields:
                raise DomainFileError(f"duplicate field {a.key}", lineno, a.col)
            fields[a.key] = a
        for need in ("rotation", "base", "radius"):
            if need not in fields:
                raise DomainFileError(f"chart is missing {need}=", lineno, 1)
        if ("expr" in fields) == ("shape" in fields):
            raise DomainFileError("chart needs exactly one of expr= or shape=", lineno, 1)
        rot = np.array(_floats(fields["rotation"], lineno, dim * dim)).reshape(dim, dim)
        base = np.array(_floats(fields["base"], lineno, dim))
        radius = _floats(fields["radius"], lineno, 1)[0]
        if radius < R:
            raise DomainFileError(f"chart radius {radius:g} is smaller than R = {R:g}", lineno,
                                  fields["radius"].vcol)
        try:
            frame = Frame(rot, base)
        except GeometryError as exc:
            raise DomainFileError(str(exc), lineno, fields["rotation"].vcol)
        if "expr" in fields:
            t = fields["expr"]
            fn = ExpressionFunction(Expression(t.value, dim - 1, lineno, t.vcol))
        else:
            t = fields["shape"]
            if t.value not in lib:
                params = dict(shape[1]) if shape and shape[0] == t.value else {}
                try:
                    lib[t.value] = make_shape(t.value, **params).body
                except GeometryError as exc:
                    raise DomainFileError(str(exc), lineno, t.vcol)
            b = lib[t.value]
            if not isinstance(b, ConvexBody):
                raise DomainFileError(f"shape {t.value!r} cannot be used as a chart reference", lineno, t.vcol)
            if b.dim != dim:
                raise DomainFileError(f"shape {t.value!r} has dimension {b.dim}, expected {dim}", lineno, t.vcol)
            fn = ExitHeightFunction(b, frame)
        chart = Chart(frame, R, L, fn)
        v0 = chart.value(np.zeros((1, dim - 1)))[0]
        if not np.isfinite(v0) or abs(v0) > 1e-9:
            raise DomainFileError(f"chart does not pass through its base point (phi(0) = {v0:g})", lineno, 1)
        charts.append(chart)
    body = ChartUnionBody(charts, name)
    ch = Characteristic(L, R, body.diameter)
    centers = np.stack([c.frame.base_point for c in charts])
    sample = body.sample_boundary(R / 64)
    try:
        atlas = Atlas(body, ch, charts, centers, R / 8 if eps0 is None else eps0, sample, name=name)
        check_atlas_lipschitz(atlas)
    except GeometryError as exc:
        raise DomainFileError(str(exc), records[0][0], 1)
    if atlas.covering_radius() >= R / 8:
        raise DomainFileError("the chart centers do not cover the boundary within R/8", records[0][0], 1)
    return atlas


def load_domain(path: str) -> Atlas:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stem = re.sub(r"\.[^.]*$", "", path.replace("\\", "/").rsplit("/", 1)[-1])
    return parse_domain(text, stem or "domain")
