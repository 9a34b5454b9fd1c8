"""Voxelwise error and mask overlap."""
from __future__ import annotations

import numpy as np

from ..errors import EmptyMask, GeometryMismatch
from ..volume import LabelMap, Volume


def as_array(v) -> np.ndarray:
    if isinstance(v, (Volume, LabelMap)):
        return v.data
    return np.asarray(v)


def _same_geometry(a, b):
    if isinstance(a, (Volume, LabelMap)) and isinstance(b, (Volume, LabelMap)):
        if not a.geometry.close_to(b.geometry):
            raise GeometryMismatch("inputs have different geometry")
    if as_array(a).shape != as_array(b).shape:
        raise GeometryMismatch(f"shapes differ: {as_array(a).shape} vs {as_array(b).shape}")


def foreground(mask) -> np.ndarray:
    """Boolean foreground of a label map or mask (label 0 is background)."""
    return as_array(mask) != 0


def mae(a, b, mask=None) -> float:
    """Mean absolute difference over voxels whose mask label is non-zero."""
    _same_geometry(a, b)
    x = as_array(a).astype(np.float64)
    y = as_array(b).astype(np.float64)
    if mask is None:
        sel = np.ones(x.shape, bool)
    else:
        _same_geometry(a, mask)
        sel = foreground(mask)
    if not sel.any():
        raise EmptyMask("MAE mask selects no voxels")
    return float(np.abs(x[sel] - y[sel]).mean())


def dice(m1, m2) -> float:
    """Dice overlap of two binary masks; 1.0 when both are empty."""
    _same_geometry(m1, m2)
    a = foreground(m1)
    b = foreground(m2)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
