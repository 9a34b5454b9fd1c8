"""Generator loss terms used to train the style-transfer networks.

These are plain functions over 2D arrays so they can be evaluated between any
two slices or patches without a network. Both the intensity loss and the
gradient difference loss are mean-reduced over valid pixels, which makes them
independent of patch size (the un-normalized sums are ``H*W`` and
``(H-1)*(W-1)`` times larger).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float
    lambda_int: float
    lambda_gdl: float

    def __post_init__(self):
        if min(self.lambda_cyc, self.lambda_int, self.lambda_gdl) < 0:
            raise ValueError("loss weights must be non-negative")


# weights used for the CBCT, CT and MRI networks
CBCT_WEIGHTS = LossWeights(10.0, 10.0, 5.0)
CT_WEIGHTS = LossWeights(10.0, 10.0, 5.0)
MRI_WEIGHTS = LossWeights(10.0, 0.4, 0.4)


@dataclass(frozen=True)
class ImagePair:
    """An input image ``x`` and its mapped counterpart ``gx``."""

    x: np.ndarray
    gx: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        gx = np.asarray(self.gx, dtype=np.float64)
        if x.ndim != 2 or x.shape != gx.shape:
            raise ShapeMismatch(f"pair needs equal 2D shapes, got {x.shape} and {gx.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(gx))):
            raise ValueError("image pair contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "gx", gx)


def intensity_loss(p: ImagePair, q: ImagePair) -> float:
    """Mean absolute difference within each pair, summed over both pairs."""
    return float(np.mean(np.abs(p.gx - p.x)) + np.mean(np.abs(q.gx - q.x)))


def gradient_difference_loss(p: ImagePair) -> float:
    """Squared mismatch of absolute row and column forward differences.

    Summed over i >= 1, j >= 1 (no padding) and divided by ``(H-1)*(W-1)``.
    """
    x, g = p.x, p.gx
    if min(x.shape) < 2:
        raise ShapeMismatch("gradient difference loss needs at least 2 pixels per axis")
    dx_i = np.abs(x[1:, :] - x[:-1, :])[:, 1:]
    dg_i = np.abs(g[1:, :] - g[:-1, :])[:, 1:]
    dx_j = np.abs(x[:, 1:] - x[:, :-1])[1:, :]
    dg_j = np.abs(g[:, 1:] - g[:, :-1])[1:, :]
    total = (dx_i - dg_i) ** 2 + (dx_j - dg_j) ** 2
    return float(total.mean())


def total_generator_loss(adv: float, cyc: float, int_: float, gdl_fwd: float, gdl_bwd: float,
                         w: LossWeights) -> float:
    return (adv + w.lambda_cyc * cyc + w.lambda_int * int_
            + w.lambda_gdl * (gdl_fwd + gdl_bwd))
