"""Exception types raised across the package."""


class DualSegError(Exception):
    """Base class for all package errors."""


class ShapeError(DualSegError, ValueError):
    pass


class InvalidWindow(DualSegError, ValueError):
    pass


class EmptyMask(DualSegError, ValueError):
    pass


class InvalidBBox(DualSegError, ValueError):
    pass


class InvalidMix(DualSegError, ValueError):
    pass


class DegenerateFeature(DualSegError, ValueError):
    pass


class NoTumorInPatch(DualSegError):
    """Raised when a patch holds no eligible tumor cell for contrastive sampling."""


class ConfigError(DualSegError, ValueError):
    pass


class StateError(DualSegError, RuntimeError):
    pass


class NonFiniteGradient(DualSegError, FloatingPointError):
    pass


class GenerationFailed(DualSegError, RuntimeError):
    pass


class FormatError(DualSegError, ValueError):
    pass


class TruncatedFile(FormatError):
    pass
