import math

import numpy as np
import pytest

from lipsmooth.domain_file import DomainFileError, load_domain, parse_domain
from lipsmooth.expr import ExpressionError


def ring_text(count=160, L=0.2, R=0.19):
    lines = ["# unit circle from explicit charts", "dim 2", f"characteristic L={L} R={R}"]
    for j in range(count):
        t = 2 * math.pi * j / count
        c, s = math.cos(t), math.sin(t)
        lines.append(f'chart rotation={s!r},{-c!r},{c!r},{s!r} base={c!r},{s!r} radius={R} '
                     f'expr="sqrt(1 - y1^2) - 1"')
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="module")
def ring():
    return parse_domain(ring_text(), "ring")


def test_ring_matches_the_disk(ring):
    assert len(ring) == 160
    assert ring.L == 0.2 and ring.R == 0.19
    X = np.random.default_rng(0).uniform(-1.2, 1.2, (3000, 2))
    r = np.linalg.norm(X, axis=1)
    keep = np.abs(r - 1) > 1e-3
    assert np.array_equal(ring.contains(X[keep]), r[keep] < 1)


def test_shape_directive_returns_library_atlas(tmp_path):
    p = tmp_path / "sq.dom"
    p.write_text("shape square side=2 R=0.5  # library square\n")
    a = load_domain(str(p))
    assert a.name == "square" and a.R == 0.5


@pytest.mark.parametrize("text, line, column, fragment", [
    ("dim 2\nfoo 1\n", 2, 1, "unknown directive"),
    ("shape blob\n", 1, 7, "unknown shape id"),
    ("dim 4\n", 1, 1, "dim takes"),
    ("dim 2\ncharacteristic L=x R=0.2\n", 2, 18, "expected comma-separated numbers"),
    ("dim 2\ncharacteristic L=0.2 R=0.2\nchart rotation=1,0,0,1 base=0,0 radius=0.1 expr=\"y1\"\n",
     3, 40, "smaller than R"),
    ("dim 2\ncharacteristic L=0.2 R=0.2\nchart rotation=1,0,0 base=0,0 radius=0.2 expr=\"y1\"\n",
     3, 16, "expected 4 numbers"),
    ("dim 2\ncharacteristic L=0.2 R=0.2\nchart rotation=1,0,0,1 base=0,0 radius=0.2\n",
     3, 1, "exactly one of"),
    ("dim 2\ncharacteristic L=0.2 R=0.2\nchart rotation=1,0,0,1 base=0,0 radius=0.2 expr=\"y1 + 1\"\n",
     3, 1, "base point"),
    ("chart rotation=1,0,0,1 base=0,0 radius=0.2 expr=\"y1\"\n", 1, 1, "dim"),
    ("", 1, 1, "no charts"),
])
def test_errors_point_at_line_and_column(text, line, column, fragment):
    with pytest.raises(DomainFileError) as info:
        parse_domain(text)
    assert (info.value.line, info.value.column) == (line, column)
    assert fragment in str(info.value)


def test_expression_errors_are_located():
    text = 'dim 2\ncharacteristic L=0.2 R=0.2\nchart rotation=1,0,0,1 base=0,0 radius=0.2 expr="y1 * * 2"\n'
    with pytest.raises(ExpressionError) as info:
        parse_domain(text)
    assert info.value.line == 3
    assert info.value.column == text.splitlines()[2].index("* 2") + 1


def test_sparse_charts_fail_the_cover_check():
    with pytest.raises(DomainFileError, match="cover"):
        parse_domain(ring_text(count=40))
