import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipsmooth.expr import Expression, ExpressionError

finite = st.floats(-3, 3, allow_nan=False)


def test_values_match_numpy():
    e = Expression("sin(y1)*y2 + y1^2 - sqrt(1 + y2^2)/2", 2)
    Y = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    ref = np.sin(Y[:, 0]) * Y[:, 1] + Y[:, 0] ** 2 - np.sqrt(1 + Y[:, 1] ** 2) / 2
    assert np.allclose(e(Y), ref, atol=1e-14)


def test_precedence():
    e = Expression("-2^2 + 3*4/2 - (1 - 5)", 1)
    assert e(np.zeros((1, 1)))[0] == pytest.approx(-4 + 6 + 4)


def test_derivatives_against_finite_differences():
    e = Expression("cos(y1*y2) + y1^3*y2 - abs(y2 - 2)", 2)
    Y = np.random.default_rng(1).uniform(-1, 1, (20, 2))
    h = 1e-5
    for k in range(2):
        d = np.zeros(2)
        d[k] = h
        fd = (e(Y + d) - e(Y - d)) / (2 * h)
        assert np.allclose(e.gradient(Y)[:, k], fd, atol=1e-7)
        gfd = (e.gradient(Y + d) - e.gradient(Y - d)) / (2 * h)
        assert np.allclose(e.hessian(Y)[:, :, k], gfd, atol=1e-6)


def test_min_max_pick_branch():
    e = Expression("max(y1, -y1) + min(y1, 0)", 1)
    Y = np.array([[-2.0], [3.0]])
    assert np.allclose(e(Y), [0.0, 3.0])
    assert np.allclose(e.gradient(Y)[:, 0], [0.0, 1.0])


@given(a=finite, b=finite, c=finite, y=finite)
@settings(max_examples=60, deadline=None)
def test_quadratic_gradient_property(a, b, c, y):
    e = Expression(f"({a!r})*y1^2 + ({b!r})*y1 + ({c!r})", 1)
    Y = np.array([[y]])
    assert e(Y)[0] == pytest.approx(a * y * y + b * y + c, abs=1e-9)
    assert e.gradient(Y)[0, 0] == pytest.approx(2 * a * y + b, abs=1e-9)
    assert e.hessian(Y)[0, 0, 0] == pytest.approx(2 * a, abs=1e-12)


@pytest.mark.parametrize("text, column, fragment", [
    ("y1 + * 2", 6, "unexpected"),
    ("y1 + y3", 6, "out of range"),
    ("foo(y1)", 1, "unknown identifier"),
    ("min(y1)", 1, "takes 2"),
    ("(y1 + 1", 8, "expected ')'"),
    ("y1 $ 2", 4, "unexpected character"),
])
def test_errors_carry_columns(text, column, fragment):
    with pytest.raises(ExpressionError) as info:
        Expression(text, 2, line=7)
    assert info.value.line == 7
    assert info.value.column == column
    assert fragment in str(info.value)
