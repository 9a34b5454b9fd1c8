"""Exception types raised across the package."""


class AbdosimError(Exception):
    """Base class for package errors."""


class GeometryMismatch(AbdosimError, ValueError):
    pass


class DegenerateWindow(AbdosimError, ValueError):
    pass


class RvolFormatError(AbdosimError, ValueError):
    pass


class SpecOutOfBounds(AbdosimError, ValueError):
    pass


class UnknownLabel(AbdosimError, KeyError):
    pass


class ShapeMismatch(AbdosimError, ValueError):
    pass


class EmptyMask(AbdosimError, ValueError):
    pass


class NoEdgesInReference(AbdosimError, ValueError):
    pass


class RoiTooSmall(AbdosimError, ValueError):
    pass


class BinMismatch(AbdosimError, ValueError):
    pass


class EdgeMismatch(AbdosimError, ValueError):
    pass


class ZeroVariance(AbdosimError, ValueError):
    pass


class OutOfSupport(AbdosimError, ValueError):
    pass


class DegenerateHistogram(AbdosimError, ValueError):
    pass


class MetricDiverged(AbdosimError, ArithmeticError):
    pass


class ConfigError(AbdosimError, ValueError):
    pass
