"""Exception hierarchy shared by every module of the package."""


class DwccaError(Exception):
    """Base class for all errors raised by this package."""


class NotPositiveDefinite(DwccaError, ValueError):
    """A Cholesky pivot fell below tolerance; raise the ridge epsilon."""

    def __init__(self, message, pivot_index=None, pivot=None):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.pivot = pivot


class NoConvergence(DwccaError, RuntimeError):
    pass


class DimensionMismatch(DwccaError, ValueError):
    pass


class DegenerateInput(DwccaError, ValueError):
    pass


class DegenerateClass(DegenerateInput):
    pass


class DegenerateBatch(DegenerateInput):
    pass


class SingularFactor(DwccaError, ValueError):
    pass


class FrozenState(DwccaError, RuntimeError):
    pass


class StaleTape(DwccaError, RuntimeError):
    pass


class ShapeMismatch(DwccaError, ValueError):
    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ConfigError(DwccaError, ValueError):
    pass


class InfeasibleStratification(DwccaError, ValueError):
    pass


class InfeasibleSplit(DwccaError, ValueError):
    pass


class NonFiniteGradient(DwccaError, FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class ClassCountMismatch(DwccaError, ValueError):
    pass


class EmptyTrainingSet(DwccaError, ValueError):
    pass


class LengthMismatch(DwccaError, ValueError):
    pass


class FormatError(DwccaError, ValueError):
    """Malformed dataset or checkpoint file; ``offset`` is the failing byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvalidSpec(DwccaError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"invalid spec field {field!r}: {message}")
        self.field = field
