"""Pure numpy kernels, the fallback when the compiled extension is absent.

Both backends must agree bitwise: squared distances are accumulated in the
fixed order (dx*dx + dy*dy) + dz*dz and ties resolve to the lowest index.
The compiled path mirrors exactly these conventions.
"""

import numpy as np

# Row block size keeps the (block, m) distance matrix small.
_BLOCK = 512


def nearest_correspondence(a, b):
    """Index into b of the nearest point for each row of a.

    Returns (idx, sqdist): int64 (n,) and float64 (n,) arrays.  Ties go to
    the lowest index in b.
    """
    n = a.shape[0]
    idx = np.empty(n, dtype=np.int64)
    sqd = np.empty(n, dtype=np.float64)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        diff = a[start:stop, None, :] - b[None, :, :]
        sq = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        local = np.argmin(sq, axis=1)
        idx[start:stop] = local
        sqd[start:stop] = sq[np.arange(stop - start), local]
    return idx, sqd


def knn_indices(points, k):
    """k nearest neighbors of every point, excluding the point itself.

    Neighbor lists are sorted by nondecreasing squared distance with ties
    resolved to the lower point index; k is truncated to n - 1.
    """
    n = points.shape[0]
    kk = min(k, n - 1)
    out = np.empty((n, kk), dtype=np.int64)
    if kk == 0:
        return out
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        diff = points[start:stop, None, :] - points[None, :, :]
        sq = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        sq[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(sq, axis=1, kind="stable")
        out[start:stop] = order[:, :kk]
    return out
