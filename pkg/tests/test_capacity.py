import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipsmooth.capacity import (CapacityError, CapacityProblem, analytic_ball_capacity, ball_capacity,
                                estimate_constants, estimate_K, exact_boundary, family_capacity,
                                r0, solve_capacity, weighted_boundary_mass)


def test_analytic_formulas():
    assert analytic_ball_capacity(2, 0.5, 1) == pytest.approx(2 * math.pi / math.log(2))
    assert analytic_ball_capacity(3, 0.5, 1) == pytest.approx(4 * math.pi * 0.5 * 1 / 0.5)
    with pytest.raises(ValueError):
        analytic_ball_capacity(2, 1, 1)


@given(s=st.floats(0.05, 0.9), r=st.floats(0.1, 10))
@settings(max_examples=40, deadline=None)
def test_analytic_scaling(s, r):
    # cap(B_{sr}, B_r) = r^{n-2} cap(B_s, B_1)
    assert analytic_ball_capacity(3, s * r, r) == pytest.approx(r * analytic_ball_capacity(3, s, 1), rel=1e-12)
    assert analytic_ball_capacity(2, s * r, r) == pytest.approx(analytic_ball_capacity(2, s, 1), rel=1e-12)


def test_planar_ball_capacity_coarse():
    num = ball_capacity(2, 0.25, 1.0, 1 / 128)
    assert num.value == pytest.approx(analytic_ball_capacity(2, 0.25, 1.0), rel=0.03)
    assert num.residual <= 1e-8
    # the discrete potential is 1 on E and 0 beyond the outer ball
    f = num.interpolator()
    assert f([[0.1, 0.0]])[0] == pytest.approx(1.0)
    assert f([[0.0, 1.2]])[0] == 0.0


def test_capacity_is_monotone_in_the_set():
    a = ball_capacity(2, 0.2, 1.0, 1 / 64).value
    b = ball_capacity(2, 0.4, 1.0, 1 / 64).value
    assert a < b


def test_solver_rejects_bad_problems():
    with pytest.raises(ValueError):
        CapacityProblem(np.zeros(2), 1.0, lambda X: np.ones(len(X), bool), 1 / 32)
    with pytest.raises(CapacityError):
        solve_capacity(CapacityProblem(np.zeros(2), 1.0, lambda X: np.zeros(len(X), bool), 1 / 64))
    with pytest.raises(CapacityError):
        solve_capacity(CapacityProblem(np.zeros(2), 1.0, lambda X: np.linalg.norm(X, axis=1) < 0.999, 1 / 64))


def test_family_capacity_is_scale_free_in_the_plane():
    assert family_capacity(2, 0.25, 0.01, 64) == family_capacity(2, 0.25, 3.0, 64)


def test_disk_boundary_mass_and_K(disk, disk_partition):
    rep = exact_boundary(disk, disk_partition)
    c = rep.points(np.array([0, 100]))
    rr = r0(disk)
    assert rr == pytest.approx(disk.R / (16 * (1 + disk.L**2)))
    # |B| = 1 on the unit circle, so the weighted mass is the arc length of the ball
    exact = 4 * math.asin(rr / 2)
    coarse = np.abs(weighted_boundary_mass(rep, c, [rr, rr]) / exact - 1)
    fine = np.abs(weighted_boundary_mass(rep, c, [rr, rr], res=16384) / exact - 1)
    # cells cut by the ball edge give a first-order error
    assert np.all(coarse < 1e-3)
    assert np.all(fine < coarse / 4)
    K = estimate_K(rep, rr / 2, c, cap_res=64)
    assert K.value > 0 and K.argmax[1] in K.family
    with pytest.raises(ValueError):
        estimate_K(rep, 2 * rr, c)


def test_constants_are_pinned(disk):
    k = estimate_constants(disk, 2.0)
    assert k["c"] == 2
    assert k["c_hat"] == max(k["A"], k["B"], k["C"])
