import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lipsmooth.geometry import (SHAPES, GeometryError, ball_grid, make_shape, point_diameter,
                                validate_graph_condition)


def test_disk_charts_lie_on_circle(disk):
    Y = ball_grid(disk.R, 1, 41)
    for i in range(0, len(disk), 17):
        pts = disk.charts[i].graph(Y)
        assert np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)


def test_disk_chart_derivatives_are_analytic(disk):
    # in the chart frame the circle is z = sqrt(1 - y^2) - 1 up to orientation
    Y = ball_grid(disk.R, 1, 41)
    v, g, h = disk.eval_charts(np.zeros(len(Y), int), Y, 2)
    s = np.sqrt(1 - Y[:, 0] ** 2)
    assert np.allclose(np.abs(v), 1 - s, atol=1e-12)
    assert np.allclose(np.abs(g[:, 0]), np.abs(Y[:, 0]) / s, atol=1e-10)
    assert np.allclose(np.abs(h[:, 0, 0]), 1 / s**3, atol=1e-8)


@pytest.mark.parametrize("name", ["disk", "square", "regular_polygon", "star"])
def test_planar_atlases_are_lipschitz_and_cover(name):
    a = make_shape(name)
    assert a.covering_radius() < a.R / 8
    Y = ball_grid(a.R, 1, 101)
    ids = np.repeat(np.arange(len(a)), len(Y))
    g = a.eval_charts(ids, np.tile(Y, (len(a), 1)), 1)[1]
    assert np.nanmax(np.abs(g)) <= a.L * (1 + 1e-9)
    assert validate_graph_condition(a, samples=500) == 0


def test_containment_matches_shape(disk, square):
    X = np.random.default_rng(2).uniform(-1.5, 1.5, (4000, 2))
    r = np.linalg.norm(X, axis=1)
    keep = np.abs(r - 1) > 1e-9
    assert np.array_equal(disk.contains(X[keep]), r[keep] < 1)
    keep = np.abs(np.max(np.abs(X), axis=1) - 1) > 1e-9
    assert np.array_equal(square.contains(X[keep]), np.max(np.abs(X[keep]), axis=1) < 1)


def test_signed_distance_sign_convention(disk):
    X = np.array([[0.0, 0.5], [0.0, 1.2]])
    sd = disk.signed_distance(X)
    assert sd[0] == pytest.approx(0.5, abs=0.01)
    assert sd[1] == pytest.approx(-0.2, abs=0.01)


def test_cube_characteristic():
    a = make_shape("cube")
    assert a.L == pytest.approx(math.sqrt(2))
    Y = ball_grid(a.R, 2, 9)
    for i in (0, len(a) // 3, len(a) - 1):
        pts = a.charts[i].graph(Y)
        assert np.allclose(np.max(np.abs(pts), axis=1), 1.0, atol=1e-9)


def test_unknown_shape_and_parameter():
    with pytest.raises(GeometryError, match="unknown shape"):
        make_shape("blob")
    with pytest.raises(GeometryError, match="unknown parameter"):
        make_shape("disk", wobble=1)
    assert "disk" in SHAPES


def test_clipped_translates_extend_charts(disk):
    ids = np.array([0, 5])
    Y = np.array([[0.05], [-0.1]])
    S = np.linspace(-0.4, 0.4, 9)[:, None]
    V = disk.eval_translates(ids, Y, S, clip=disk.R)
    Z = Y[:, None, :] - S[None]
    Z = np.clip(Z, -disk.R, disk.R)
    ref = np.stack([disk.eval_charts(np.full(len(S), i), Z[p])[0] for p, i in enumerate(ids)])
    assert np.allclose(V, ref, atol=1e-13)
    # inside B'_R the projection is the identity
    near = np.array([[-0.05], [0.0], [0.05]])
    plain = disk.eval_translates(ids, Y, near)
    assert np.allclose(plain, disk.eval_translates(ids, Y, near, clip=disk.R), atol=1e-13)


@given(arrays(np.float64, st.tuples(st.integers(2, 60), st.sampled_from([2, 3])),
              elements=st.floats(-10, 10, allow_nan=False)))
@settings(max_examples=50, deadline=None)
def test_point_diameter_matches_brute_force(P):
    D = np.sqrt(((P[:, None, :] - P[None]) ** 2).sum(-1)).max()
    assert point_diameter(P) == pytest.approx(D, rel=1e-12, abs=1e-12)
