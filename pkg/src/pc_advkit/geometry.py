"""Point-cloud container, unit-ball normalization, kNN and normal estimation.

Normals come from the classic local-frame construction: for each point,
accumulate the outer products of the offsets to its k nearest neighbors,
take the eigenvector of the smallest eigenvalue, and orient it away from
the cloud centroid.  The 3x3 symmetric eigenproblem is solved with a
vectorized cyclic Jacobi sweep, so there is no dependency on an external
eigensolver and results are deterministic.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidInputError

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])

# Below this second eigenvalue the neighborhood has no usable plane
# (coincident or collinear neighbors) and the normal is ill-defined.
DEGENERATE_EIGENVALUE = 1e-12

# Dot products this close to zero fall through to the sign tiebreak.
_ORIENT_EPS = 1e-9


class PointCloud:
    """n 3D points with optional per-point unit normals and a class label."""

    __slots__ = ("points", "normals", "label")

    def __init__(self, points, normals=None, label=None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InvalidInputError(f"points must be (n, 3) with n >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise InvalidInputError("points contain non-finite coordinates")
        self.points = np.ascontiguousarray(pts)
        if normals is not None:
            nrm = np.asarray(normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise InvalidInputError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            if not np.isfinite(nrm).all():
                raise InvalidInputError("normals contain non-finite components")
            lengths = np.sqrt((nrm * nrm).sum(axis=1))
            if np.abs(lengths - 1.0).max() > 1e-6:
                raise InvalidInputError("normals must be unit length within 1e-6")
            self.normals = np.ascontiguousarray(nrm)
        else:
            self.normals = None
        self.label = None if label is None else int(label)

    @property
    def n(self):
        return self.points.shape[0]

    def copy(self):
        return PointCloud(
            self.points.copy(),
            None if self.normals is None else self.normals.copy(),
            self.label,
        )


@dataclass
class NeighborIndex:
    """kNN result: neighbors[i] lists point i's nearest points, self excluded."""

    k: int
    neighbors: np.ndarray  # (n, min(k, n-1)) int64


@dataclass
class LocalFrame:
    """Eigenpairs of a 3x3 symmetric matrix, eigenvalues nonincreasing.

    eigenvectors[j] is the unit eigenvector for eigenvalues[j]; the rows
    form an orthonormal frame.
    """

    eigenvalues: np.ndarray  # (3,)
    eigenvectors: np.ndarray  # (3, 3), rows e1, e2, e3


def _points_of(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def normalize_unit_ball(cloud):
    """Center at the centroid and scale so the farthest point has norm 1.

    An all-coincident cloud maps to all zeros.  Normals, being invariant
    under translation and uniform scaling, carry over unchanged.
    """
    pts = _points_of(cloud)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius > 0.0:
        centered = centered / radius
    normals = cloud.normals if isinstance(cloud, PointCloud) else None
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud(centered, normals, label)


def knn(cloud, k):
    """Exact brute-force k nearest neighbors for every point.

    Neighbor lists are sorted by nondecreasing distance, ties broken by
    lower point index.  k larger than n - 1 is silently truncated.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    pts = _points_of(cloud)
    return NeighborIndex(k=int(k), neighbors=kernels.knn_indices(pts, k))


def _covariances(points, neighbor_idx):
    """Per-point sum of outer products of neighbor offsets, (n, 3, 3).

    The six distinct entries are computed once and mirrored, so the result
    is bitwise symmetric by construction.
    """
    offs = points[neighbor_idx] - points[:, None, :]  # (n, kk, 3)
    ox, oy, oz = offs[..., 0], offs[..., 1], offs[..., 2]
    n = points.shape[0]
    cov = np.empty((n, 3, 3))
    cov[:, 0, 0] = (ox * ox).sum(axis=1)
    cov[:, 1, 1] = (oy * oy).sum(axis=1)
    cov[:, 2, 2] = (oz * oz).sum(axis=1)
    cov[:, 0, 1] = cov[:, 1, 0] = (ox * oy).sum(axis=1)
    cov[:, 0, 2] = cov[:, 2, 0] = (ox * oz).sum(axis=1)
    cov[:, 1, 2] = cov[:, 2, 1] = (oy * oz).sum(axis=1)
    return cov


def covariance_matrix(cloud, index, i):
    """Local covariance of point i's neighborhood from a precomputed index."""
    pts = _points_of(cloud)
    if not 0 <= i < pts.shape[0]:
        raise InvalidInputError(f"point index {i} out of range for n={pts.shape[0]}")
    nbrs = index.neighbors[i]
    offs = pts[nbrs] - pts[i]
    ox, oy, oz = offs[:, 0], offs[:, 1], offs[:, 2]
    cov = np.empty((3, 3))
    cov[0, 0] = (ox * ox).sum()
    cov[1, 1] = (oy * oy).sum()
    cov[2, 2] = (oz * oz).sum()
    cov[0, 1] = cov[1, 0] = (ox * oy).sum()
    cov[0, 2] = cov[2, 0] = (ox * oz).sum()
    cov[1, 2] = cov[2, 1] = (oy * oz).sum()
    return cov


def _jacobi_eigh3(mats, sweeps=30, tol=1e-14):
    """Eigendecomposition of a batch of symmetric 3x3 matrices.

    Vectorized cyclic Jacobi: rotate away each off-diagonal entry in a
    fixed (0,1), (0,2), (1,2) order until all off-diagonals fall below
    tol relative to the matrix scale.  Returns eigenvalues sorted
    nonincreasing (m, 3) and matching row eigenvectors (m, 3, 3).
    """
    a = np.array(mats, dtype=np.float64)
    m = a.shape[0]
    v = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    scale = np.abs(a).max(axis=(1, 2))
    scale[scale == 0.0] = 1.0
    for _ in range(sweeps):
        off = np.maximum(
            np.abs(a[:, 0, 1]), np.maximum(np.abs(a[:, 0, 2]), np.abs(a[:, 1, 2]))
        )
        if (off <= tol * scale).all():
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > tol * scale
            if not active.any():
                continue
            app = a[:, p, p]
            aqq = a[:, q, q]
            theta = np.zeros(m)
            np.divide(aqq - app, 2.0 * apq, out=theta, where=active)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0.0] = 1.0  # 45-degree rotation when diagonals match
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            # Update the two affected rows/columns of a.
            for r in range(3):
                if r == p or r == q:
                    continue
                arp = a[:, r, p].copy()
                arq = a[:, r, q].copy()
                a[:, r, p] = a[:, p, r] = c * arp - s * arq
                a[:, r, q] = a[:, q, r] = s * arp + c * arq
            app_new = c * c * app - 2.0 * s * c * apq + s * s * aqq
            aqq_new = s * s * app + 2.0 * s * c * apq + c * c * aqq
            a[:, p, p] = app_new
            a[:, q, q] = aqq_new
            a[:, p, q] = a[:, q, p] = np.where(active, 0.0, apq)
            vp = v[:, :, p].copy()
            vq = v[:, :, q].copy()
            v[:, :, p] = c[:, None] * vp - s[:, None] * vq
            v[:, :, q] = s[:, None] * vp + c[:, None] * vq
    vals = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    vals_sorted = np.take_along_axis(vals, order, axis=1)
    vecs_cols = np.take_along_axis(v, order[:, None, :], axis=2)
    return vals_sorted, vecs_cols.transpose(0, 2, 1)


def eigen_symmetric3(matrix):
    """Eigenpairs of one symmetric 3x3 matrix as a LocalFrame."""
    s = np.asarray(matrix, dtype=np.float64)
    if s.shape != (3, 3):
        raise InvalidInputError(f"expected a 3x3 matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise InvalidInputError("matrix contains non-finite entries")
    asym = np.abs(s - s.T).max()
    if asym > 1e-9 * max(1.0, np.abs(s).max()):
        raise InvalidInputError(f"matrix is not symmetric (max asymmetry {asym:g})")
    vals, vecs = _jacobi_eigh3(s[None])
    return LocalFrame(eigenvalues=vals[0], eigenvectors=vecs[0])


def _orient(normals, points, centroid):
    """Flip normals to point away from the centroid.

    When the normal is (numerically) perpendicular to the centroid offset
    the sign falls back to positive z, then positive y, then positive x.
    """
    dots = ((points - centroid) * normals).sum(axis=1)
    flip = dots < -_ORIENT_EPS
    tie = np.abs(dots) <= _ORIENT_EPS
    for axis in (2, 1, 0):
        comp = normals[:, axis]
        decided = tie & (np.abs(comp) > _ORIENT_EPS)
        flip = flip | (decided & (comp < 0.0))
        tie = tie & ~decided
    normals[flip] = -normals[flip]
    return normals


def estimate_normals(cloud, k=20):
    """Attach a unit normal to every point of the cloud.

    Normal = eigenvector of the smallest eigenvalue of the neighborhood
    covariance, oriented away from the cloud centroid.  Neighborhoods with
    no usable plane (second eigenvalue below 1e-12: coincident or collinear
    neighbors) get the fallback normal (0, 0, 1) and a RuntimeWarning.
    """
    pts = _points_of(cloud)
    if pts.shape[0] < 2:
        raise InvalidInputError("normal estimation needs at least 2 points")
    idx = kernels.knn_indices(pts, k)
    cov = _covariances(pts, idx)
    vals, vecs = _jacobi_eigh3(cov)
    normals = vecs[:, 2, :].copy()
    lengths = np.sqrt((normals * normals).sum(axis=1))
    normals /= lengths[:, None]
    normals = _orient(normals, pts, pts.mean(axis=0))
    degenerate = vals[:, 1] < DEGENERATE_EIGENVALUE
    for i in np.flatnonzero(degenerate):
        warnings.warn(
            f"degenerate neighborhood at point {i}; using fallback normal",
            RuntimeWarning,
            stacklevel=2,
        )
        normals[i] = FALLBACK_NORMAL
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud(pts, normals, label)
