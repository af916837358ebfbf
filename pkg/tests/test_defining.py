import numpy as np
import pytest

from lipsmooth.defining import (INNER, OUTSIDE, DefiningFunction, classify, defining_triple,
                                extract_chart, hausdorff_band_check, sandwich_gaps, solve_roots)
from lipsmooth.geometry import GeometryError, ball_grid


@pytest.fixture(scope="module")
def triple(disk, disk_partition):
    return defining_triple(disk, 128, disk_partition)


def test_exact_function_sign_is_membership(disk, disk_partition):
    F = DefiningFunction(disk, disk_partition)
    X = np.random.default_rng(0).uniform(-1.1, 1.1, (3000, 2))
    v = F(X)
    ok = np.isfinite(v) & (np.abs(np.linalg.norm(X, axis=1) - 1) > 1e-6)
    assert np.array_equal(v[ok] < 0, np.linalg.norm(X[ok], axis=1) < 1)


def test_sandwich_on_a_band(disk, triple):
    rng = np.random.default_rng(1)
    th = rng.uniform(0, 2 * np.pi, 4000)
    r = 1 + rng.uniform(-0.02, 0.02, 4000)  # inside the cover W
    X = np.column_stack([r * np.cos(th), r * np.sin(th)])
    cl = classify(triple, X)
    v = cl.values
    assert np.all(np.isfinite(v))
    assert np.all((v[:, 0] < v[:, 1]) & (v[:, 1] < v[:, 2]))
    # points well inside or outside fall in the extreme regions
    assert np.all(cl.region[r < 0.99] == INNER)
    assert np.all(cl.region[r > 1.01] == OUTSIDE)


def test_sandwich_gaps_scale_with_partition_weight(disk, triple):
    # w L/m <= F - F_m <= 3 w L/m, likewise for F~_m - F, with w = sum_{j>=1} xi_j
    X = np.random.default_rng(2).uniform(-1.1, 1.1, (20000, 2))
    g = sandwich_gaps(triple, X)
    inW = np.isfinite(g.weight)
    assert inW.sum() > 1000 and np.any(g.weight[inW] == 0) and np.any(g.weight[inW] == 1)
    s = disk.L / 128
    for gap in (g.lower[inW], g.upper[inW]):
        w = g.weight[inW]
        assert np.all(gap >= w * s * (1 - 1e-9) - 1e-15)
        assert np.all(gap <= 3 * w * s * (1 + 1e-9) + 1e-15)
        assert np.all(gap[w > 0] > 0)
    far = triple[1].partition.evaluate(X[~inW]).in_cover
    assert not np.any(far)


def test_band_containment_at_m0(disk, triple):
    assert hausdorff_band_check(triple[1], 128, count=5000).ok


def test_extraction_of_exact_boundary_recovers_chart(disk, triple):
    F = triple[1]
    ch = extract_chart(F, 3, res=17)
    ref = disk.eval_charts(np.full(len(ch.nodes), 3), ch.nodes, 1)
    assert np.allclose(ch.values, ref[0], atol=1e-10)
    assert np.allclose(ch.grad, ref[1], atol=1e-6)
    assert ch.vertical_margin >= 1 / (2 * np.sqrt(1 + disk.L**2))


def test_outer_roots_lie_outside_the_disk(disk, triple):
    Y = ball_grid(disk.window, 1, 9)
    ids = np.repeat(np.arange(0, len(disk), 32), len(Y))
    rr = solve_roots(triple[0], ids, np.tile(Y, (len(ids) // len(Y), 1)))
    assert np.all(rr.ok)
    k = disk.dim - 1
    rot = disk.rotations[ids]
    P = disk.centers[ids] + np.einsum("pk,pkj->pj", np.tile(Y, (len(ids) // len(Y), 1)), rot[:, :k]) \
        + rr.values[:, None] * rot[:, k]
    assert np.all(np.linalg.norm(P, axis=1) > 1)


def test_small_m_is_rejected(disk, disk_partition):
    with pytest.raises(GeometryError):
        DefiningFunction(disk, disk_partition, "outer", 4)


def test_variant_validation(disk, disk_partition):
    with pytest.raises(ValueError):
        DefiningFunction(disk, disk_partition, "middle")
    with pytest.raises(ValueError):
        DefiningFunction(disk, disk_partition, "outer")
