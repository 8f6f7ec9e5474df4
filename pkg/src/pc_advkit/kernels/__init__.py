"""Kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy reference implementation is used.  Set PC_ADVKIT_NO_EXT=1 to force
the fallback.  Both produce bitwise-identical outputs, so the choice only
affects speed.
"""

import os

import numpy as np

from . import reference

compiled = None
if not os.environ.get("PC_ADVKIT_NO_EXT"):
    try:
        from . import _core as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else reference
BACKEND = "compiled" if compiled is not None else "numpy"


def _as_c_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def nearest_correspondence(a, b):
    """For each row of a, the index of the nearest row of b and its squared distance."""
    return _impl.nearest_correspondence(_as_c_f64(a), _as_c_f64(b))


def knn_indices(points, k):
    """Brute-force k-nearest-neighbor indices, self excluded, ties to lower index."""
    return _impl.knn_indices(_as_c_f64(points), int(k))
