"""Kernel backends against brute-force oracles and each other."""

import numpy as np
import pytest

from pc_advkit import kernels
from pc_advkit.kernels import reference


def oracle_nearest(a, b):
    """Literal double loop with the documented accumulation order."""
    n, m = a.shape[0], b.shape[0]
    idx = np.empty(n, dtype=np.int64)
    sqd = np.empty(n, dtype=np.float64)
    for i in range(n):
        best_j, best_d = 0, np.inf
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = (dx * dx + dy * dy) + dz * dz
            if d < best_d:  # strict: ties keep the lower index
                best_d, best_j = d, j
        idx[i] = best_j
        sqd[i] = best_d
    return idx, sqd


def oracle_knn(points, k):
    n = points.shape[0]
    kk = min(k, n - 1)
    out = np.empty((n, kk), dtype=np.int64)
    for i in range(n):
        ds = []
        for j in range(n):
            if j == i:
                continue
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            dz = points[i, 2] - points[j, 2]
            ds.append(((dx * dx + dy * dy) + dz * dz, j))
        ds.sort()  # (distance, index) pairs: ties resolve to lower index
        out[i] = [j for _, j in ds[:kk]]
    return out


@pytest.mark.parametrize("seed,n,m", [(0, 17, 23), (1, 40, 5), (2, 1, 9)])
def test_nearest_matches_oracle(seed, n, m):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 3))
    b = rng.normal(size=(m, 3))
    idx, sqd = kernels.nearest_correspondence(a, b)
    oidx, osqd = oracle_nearest(a, b)
    np.testing.assert_array_equal(idx, oidx)
    np.testing.assert_array_equal(sqd, osqd)


def test_nearest_tie_takes_lower_index():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    idx, sqd = kernels.nearest_correspondence(a, b)
    assert idx[0] == 0
    assert sqd[0] == 1.0


@pytest.mark.parametrize("seed,n,k", [(3, 25, 4), (4, 9, 20), (5, 2, 1)])
def test_knn_matches_oracle(seed, n, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    got = kernels.knn_indices(pts, k)
    want = oracle_knn(pts, k)
    assert got.shape == want.shape  # k is truncated to n - 1
    np.testing.assert_array_equal(got, want)


def test_knn_tie_prefers_lower_index():
    # Four corners of a square: each point has two neighbors at equal
    # distance; the lower-indexed one must come first.
    pts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]
    )
    nbrs = kernels.knn_indices(pts, 2)
    np.testing.assert_array_equal(nbrs[0], [1, 2])
    np.testing.assert_array_equal(nbrs[3], [1, 2])


def test_backends_agree_bitwise():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(301, 3))
    other = rng.normal(size=(77, 3))
    # Inject exact ties by duplicating coordinates.
    pts[50] = pts[10]
    other[5] = other[60]
    ridx, rsqd = reference.nearest_correspondence(pts, other)
    idx, sqd = kernels.nearest_correspondence(pts, other)
    np.testing.assert_array_equal(idx, ridx)
    assert (sqd == rsqd).all()
    np.testing.assert_array_equal(
        kernels.knn_indices(pts, 20), reference.knn_indices(pts, 20)
    )


def test_backend_reports_name():
    assert kernels.BACKEND in ("compiled", "numpy")
