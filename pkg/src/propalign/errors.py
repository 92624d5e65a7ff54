"""Exception types shared across the package."""


class PropalignError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PropalignError, ValueError):
    pass


class ShapeError(PropalignError, ValueError):
    pass


class ConfigurationError(PropalignError, ValueError):
    pass


class DegenerateInputError(PropalignError, ValueError):
    pass


class OutOfFrustumError(PropalignError, ValueError):
    pass


class GenerationError(PropalignError, RuntimeError):
    pass


class SamplingError(PropalignError, RuntimeError):
    pass


class OrderingError(PropalignError, RuntimeError):
    """A training stage was requested before its prerequisite stage."""


class NonFiniteError(PropalignError, FloatingPointError):
    """A loss or gradient became NaN/inf; the message names the culprit."""


class FormatError(PropalignError, ValueError):
    """A serialized document has the wrong version or inconsistent dimensions."""
