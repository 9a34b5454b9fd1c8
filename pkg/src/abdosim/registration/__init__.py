"""Non-rigid B-spline registration driven by MMI, NC or MS similarity."""
from .bspline import BSplineTransform, bspline3, bspline3_derivative, bspline_displace
from .engine import (
    METRICS,
    MattesHistogram,
    RegistrationConfig,
    RegistrationResult,
    close_mask,
    evaluate_registration,
    mean_squares,
    metric_value_and_gradient,
    normalized_correlation,
    register,
    warp_mask,
)

__all__ = [
    "BSplineTransform", "bspline3", "bspline3_derivative", "bspline_displace", "METRICS",
    "MattesHistogram", "RegistrationConfig", "RegistrationResult", "close_mask",
    "evaluate_registration", "mean_squares", "metric_value_and_gradient",
    "normalized_correlation", "register", "warp_mask",
]
