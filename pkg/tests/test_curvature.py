import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lipsmooth.curvature import bbb_violations, exact_solver, forms, surface_quadrature, weak_curvature

vals = st.floats(-5, 5, allow_nan=False)


@given(g=vals, h=vals)
@settings(max_examples=80, deadline=None)
def test_planar_curve_curvature(g, h):
    # classical curvature of a graph y -> phi(y)
    cf = weak_curvature(np.array([[g]]), np.array([[[h]]]))
    assert cf.norm[0] == pytest.approx(abs(h) / (1 + g * g) ** 1.5, rel=1e-12, abs=1e-300)


@given(arrays(np.float64, (5, 2), elements=st.floats(-3, 3)))
@settings(max_examples=50, deadline=None)
def test_metric_inverse(G):
    f = forms(G)
    assert np.allclose(f.g @ f.g_inv, np.eye(2), atol=1e-10)


@given(arrays(np.float64, (20, 2), elements=st.floats(-1, 1)),
       arrays(np.float64, (20, 2, 2), elements=st.floats(-10, 10)),
       st.floats(0.1, 3))
@settings(max_examples=60, deadline=None)
def test_bbb_sandwich_property(G, H, L):
    H = (H + H.transpose(0, 2, 1)) / 2
    n = np.linalg.norm(G, axis=1, keepdims=True)
    G = np.where(n > L, G * L / np.maximum(n, 1e-300), G)
    assert bbb_violations(G, H, L) == 0


def test_principal_curvatures_of_a_paraboloid():
    # phi = (a y1^2 + b y2^2)/2 at the origin has |B| = sqrt(a^2 + b^2)
    cf = weak_curvature(np.zeros((1, 2)), np.array([[[3.0, 0.0], [0.0, -4.0]]]))
    assert cf.norm[0] == pytest.approx(5.0)


def test_disk_surface_quadrature(disk, disk_partition):
    sq = surface_quadrature(disk, disk_partition, exact_solver(disk), res=65)
    assert sq.measure() == pytest.approx(2 * np.pi, rel=1e-6)
    assert sq.curvature_integral(1) == pytest.approx(2 * np.pi, rel=1e-6)
    assert sq.curvature_integral(2) == pytest.approx(2 * np.pi, rel=1e-6)
    with pytest.raises(ValueError):
        sq.curvature_integral(0.5)
