"""Co-registered synthetic abdominal CT/CBCT/MRI volumes and B-spline registration benchmarking."""

__version__ = "0.1.0"
