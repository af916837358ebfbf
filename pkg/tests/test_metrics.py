import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lipsmooth import metrics
from lipsmooth.curvature import exact_solver
from lipsmooth.metrics import (ConvergenceReport, chart_sup_bound, hausdorff, hausdorff_bound, sample_boundary,
                               sobolev_error)

pts = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(2)), elements=st.floats(-5, 5))


def _circle(r, n=4000):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return r * np.column_stack([np.cos(t), np.sin(t)])


def test_hausdorff_of_concentric_circles():
    assert hausdorff(_circle(1.0), _circle(1.3)) == pytest.approx(0.3, abs=1e-3)


@given(A=pts, B=pts)
@settings(max_examples=60, deadline=None)
def test_hausdorff_is_a_symmetric_brute_force_max_min(A, B):
    D = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1))
    ref = max(D.min(axis=1).max(), D.min(axis=0).max())
    assert hausdorff(A, B) == pytest.approx(ref, abs=1e-12)
    assert hausdorff(B, A) == pytest.approx(ref, abs=1e-12)
    assert hausdorff(A, A) == 0


@given(A=pts, B=pts, C=pts)
@settings(max_examples=40, deadline=None)
def test_hausdorff_triangle_inequality(A, B, C):
    assert hausdorff(A, C) <= hausdorff(A, B) + hausdorff(B, C) + 1e-12


def test_hausdorff_rejects_empty():
    with pytest.raises(ValueError):
        hausdorff(np.zeros((0, 2)), np.zeros((3, 2)))


def test_bounds_formulas():
    L, m = 1.0, 16
    assert hausdorff_bound(L, m) == pytest.approx(12 * math.sqrt(2) / 16)
    assert chart_sup_bound(L, m) == pytest.approx(6 * math.sqrt(2) / 16)


def test_sampled_exact_disk_boundary(disk):
    s = sample_boundary(disk, exact_solver(disk), 32)
    r = np.linalg.norm(s.points, axis=1)
    assert np.allclose(r, 1, atol=1e-12)
    assert hausdorff(s.points, _circle(1.0, 20000)) <= s.error + math.pi / 20000


def test_sobolev_error_by_hand():
    w = np.full(4, 0.5)
    psi = (np.array([1.0, 2, 3, 4]), np.ones((4, 1)), np.zeros((4, 1, 1)))
    phi = (np.array([1.0, 2, 3, 5]), np.zeros((4, 1)), np.zeros((4, 1, 1)))
    # |diff|^2 summed: values 1, gradients 4 * 1
    assert sobolev_error(psi, phi, 1, 2, w) == pytest.approx(math.sqrt(0.5 * 5))
    assert sobolev_error(psi, phi, 2, 1, w) == pytest.approx(0.5 * 5)
    with pytest.raises(ValueError):
        sobolev_error(psi, phi, 3, 2, w)
    with pytest.raises(ValueError):
        sobolev_error(psi, (phi[0][:3], phi[1], phi[2]), 1, 2, w)


def test_convergence_report_serialization_is_stable():
    rep = ConvergenceReport("disk", 0.2, 0.19, 0.02, 256, 128.0, 33, {"16.0": None})
    a, b = rep.to_json(), rep.to_json()
    assert a == b and '"constants"' in a
    assert rep.to_csv().splitlines()[0].startswith("m,above_m0,hausdorff_outer")


def test_schedule_must_increase(disk):
    with pytest.raises(ValueError):
        metrics.convergence_study(disk, [32, 16])
