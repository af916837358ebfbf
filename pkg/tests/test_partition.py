import numpy as np
from hypothesis import given, settings, strategies as st

from lipsmooth.partition import BALL_RADIUS, BALL_SMOOTHING


def _near_boundary(atlas, count, seed, width=0.05):
    rng = np.random.default_rng(seed)
    S = atlas.sample
    pick = rng.integers(0, len(S.points), count)
    return S.points[pick] + rng.uniform(-width, width, count)[:, None] * S.normals[pick]


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_partition_sums_to_one_in_cover(disk, disk_partition, seed):
    X = _near_boundary(disk, 200, seed)
    pv = disk_partition.evaluate(X)
    ok = pv.in_cover
    tot = np.where(pv.idx >= 0, pv.xi, 0).sum(axis=1) + pv.xi0
    assert np.allclose(tot[ok], 1.0, atol=1e-13)
    assert np.all(pv.xi[ok][pv.idx[ok] >= 0] >= 0)


def test_boundary_bumps_have_small_support(disk, disk_partition):
    X = _near_boundary(disk, 500, 4)
    pv = disk_partition.evaluate(X)
    reach = (BALL_RADIUS + BALL_SMOOTHING) * disk.R
    for p in range(len(X)):
        for j, v in zip(pv.idx[p], pv.xi[p]):
            if j >= 0 and v > 0:
                assert np.linalg.norm(X[p] - disk.centers[j]) < reach


def test_interior_bump_is_one_deep_inside(disk, disk_partition):
    pv = disk_partition.evaluate(np.array([[0.0, 0.0], [0.3, -0.2]]))
    assert np.allclose(pv.xi0, 1.0)


def _dense(pv, field, count):
    """Scatter the per-neighbour arrays to one column per chart id."""
    arr = getattr(pv, field)
    out = np.zeros((arr.shape[0], count) + arr.shape[2:])
    p, k = np.nonzero(pv.idx >= 0)
    out[p, pv.idx[p, k]] = arr[p, k]
    return out


def test_partition_derivatives_against_finite_differences(disk, disk_partition):
    X = _near_boundary(disk, 40, 5, width=0.02)
    N = len(disk)
    pv = disk_partition.evaluate(X, 2)
    h = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        a, b = disk_partition.evaluate(X + e, 1), disk_partition.evaluate(X - e, 1)
        fd0 = (a.xi0 - b.xi0) / (2 * h)
        assert np.allclose(pv.dxi0[:, d], fd0, atol=1e-5 / disk.R)
        fd = (_dense(a, "xi", N) - _dense(b, "xi", N)) / (2 * h)
        assert np.allclose(_dense(pv, "dxi", N)[..., d], fd, atol=1e-5 / disk.R)
        # second derivatives reach 1e4 here; compare relative to their scale
        H = _dense(pv, "d2xi", N)[..., d]
        fd2 = (_dense(a, "dxi", N) - _dense(b, "dxi", N)) / (2 * h)
        assert np.max(np.abs(H - fd2)) <= 1e-5 * np.max(np.abs(H))
        fd20 = (a.dxi0 - b.dxi0) / (2 * h)
        assert np.max(np.abs(pv.d2xi0[..., d] - fd20)) <= 1e-5 * np.max(np.abs(pv.d2xi0))


def test_derivative_report_is_scale_free(disk, disk_partition):
    rep = disk_partition.derivative_report(_near_boundary(disk, 300, 6))
    assert 0 < rep["C1"] < 200 and 0 < rep["C2"] < 1e5
