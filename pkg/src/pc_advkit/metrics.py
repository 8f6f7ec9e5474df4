"""Perturbation-size metrics between an adversarial cloud and its clean source.

All set distances are directed from the adversarial cloud to the clean one
and use squared Euclidean point distances.  plane_distortion projects each
displacement onto the clean cloud's normal at the matched point, which is
the measure that separates along-the-surface sliding from visible lifting.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .geometry import PointCloud, estimate_normals

METRIC_CSV_HEADER = "instance_id,d_norm,d_chamfer,d_hausdorff,d_plane"


@dataclass
class MetricReport:
    d_norm: float
    d_chamfer: float
    d_hausdorff: float
    d_plane: float

    def csv_row(self, instance_id):
        fields = [self.d_norm, self.d_chamfer, self.d_hausdorff, self.d_plane]
        return ",".join([str(instance_id)] + [format(v, ".9g") for v in fields])


def _points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def l2_norm_distance(adv, clean):
    """Frobenius norm of the displacement matrix; requires matched counts."""
    a, c = _points(adv), _points(clean)
    if a.shape[0] != c.shape[0]:
        raise InvalidInputError(
            f"point counts differ: {a.shape[0]} vs {c.shape[0]}"
        )
    d = a - c
    return float(np.sqrt((d * d).sum()))


def chamfer(adv, clean):
    """Mean over adversarial points of the squared distance to the nearest clean point."""
    a, c = _points(adv), _points(clean)
    _, sqd = kernels.nearest_correspondence(a, c)
    return float(sqd.mean())


def hausdorff(adv, clean):
    """Max over adversarial points of the squared distance to the nearest clean point."""
    a, c = _points(adv), _points(clean)
    _, sqd = kernels.nearest_correspondence(a, c)
    return float(sqd.max())


def plane_distortion(adv, clean, k=20):
    """Mean squared projection of displacements onto clean-surface normals.

    Each adversarial point is matched to its nearest clean point (ties to
    the lower clean index) and the displacement to that point is projected
    onto the clean cloud's normal there.  Clean normals are estimated with
    neighborhood size k unless the clean cloud already carries normals.
    """
    a = _points(adv)
    if isinstance(clean, PointCloud) and clean.normals is not None:
        c, normals = clean.points, clean.normals
    else:
        estimated = estimate_normals(clean, k)
        c, normals = estimated.points, estimated.normals
    idx, _ = kernels.nearest_correspondence(a, c)
    disp = a - c[idx]
    proj = (disp * normals[idx]).sum(axis=1)
    return float((proj * proj).mean())


def full_report(adv, clean, k=20):
    """All four metrics on identical inputs, bundled for CSV emission."""
    return MetricReport(
        d_norm=l2_norm_distance(adv, clean),
        d_chamfer=chamfer(adv, clean),
        d_hausdorff=hausdorff(adv, clean),
        d_plane=plane_distortion(adv, clean, k),
    )
