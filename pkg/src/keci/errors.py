"""Exception hierarchy shared across the package."""


class KeciError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(KeciError):
    """Tensor shapes are incompatible for the requested operation."""


class ValidationError(KeciError):
    """Input data violates a documented invariant."""


class FormatError(KeciError):
    """A file does not match its expected on-disk format."""


class ContractError(KeciError):
    """An internal API was called outside its contract."""
