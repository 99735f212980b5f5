"""Exception types shared across the package."""


class MixcryptError(Exception):
    """Base class for all package errors."""


class DimensionError(MixcryptError):
    """Shapes or sizes do not conform."""


class ParameterError(MixcryptError):
    """An argument is outside its documented domain."""


class FormatError(MixcryptError):
    """A file or byte stream does not match its declared format."""


class DataError(MixcryptError):
    """Input data violates a precondition (missing oracle, degenerate labels, ...)."""


class AmbiguityError(DataError):
    """A quantity cannot be inferred uniquely from the available labels."""


class ContractError(MixcryptError):
    """An API contract was violated (e.g. backward on a non-scalar)."""
