"""Hot voxel/point kernels with a numba path and a numpy fallback.

The active path is chosen once at import time (see :mod:`calcpheno._accel`).
"""
import numpy as np

from .._accel import USE_NUMBA, backend
from . import _numpy

if USE_NUMBA:
    from . import _numba as _impl
else:
    _impl = _numpy

__all__ = ["backend", "neighbour_offsets", "label_components", "component_stats",
           "count_in_mask", "block_sums", "dbscan_labels"]


def neighbour_offsets(connectivity):
    """Backward half of the 6- or 26-neighbourhood as (dz, dy, dx) rows."""
    if connectivity == 6:
        return np.array([[-1, 0, 0], [0, -1, 0], [0, 0, -1]], np.int64)
    if connectivity != 26:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    rows = [(dz, dy, dx)
            for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if (dz, dy, dx) < (0, 0, 0)]
    return np.array(rows, np.int64)


def label_components(mask, connectivity=26, impl=None):
    impl = impl or _impl
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    return impl.label_components(mask, neighbour_offsets(connectivity))


def component_stats(labels, n, impl=None):
    return (impl or _impl).component_stats(np.ascontiguousarray(labels), int(n))


def count_in_mask(labels, n, mask, impl=None):
    return (impl or _impl).count_in_mask(np.ascontiguousarray(labels), int(n),
                                         np.ascontiguousarray(mask, dtype=np.bool_))


def block_sums(mask, w, impl=None):
    return (impl or _impl).block_sums(np.ascontiguousarray(mask, dtype=np.bool_), int(w))


def dbscan_labels(points, eps, min_pts, impl=None):
    if len(points) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.bool_)
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(len(points), -1)
    return (impl or _impl).dbscan_labels(points, float(eps), int(min_pts))
