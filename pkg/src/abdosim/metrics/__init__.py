"""Image quality, noise and overlap metrics."""
from .noise import (
    Histogram,
    RadialNps,
    hist_cc,
    histogram,
    ncc,
    noise_magnitude,
    radial_nps,
)
from .overlap import dice, mae
from .report import MetricReport
from .similarity import edge_ratios, fsim, ssim

__all__ = [
    "Histogram", "MetricReport", "RadialNps", "dice", "edge_ratios", "fsim", "hist_cc",
    "histogram", "mae", "ncc", "noise_magnitude", "radial_nps", "ssim",
]
