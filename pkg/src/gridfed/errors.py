"""Exception hierarchy shared across the package."""


class GridFedError(Exception):
    """Base class for all package errors."""


class ValidationError(GridFedError, ValueError):
    """An argument or configuration value is out of its allowed range."""


class DimensionError(ValidationError):
    """Parameter vectors or segments have incompatible lengths."""


class ProtocolError(GridFedError, RuntimeError):
    """A federation step was invoked in a state the protocol does not allow."""


class NoPathError(GridFedError):
    """The goal cell cannot be reached from the start cell."""


class SamplingExhaustedError(GridFedError):
    """Rejection sampling ran out of attempts."""


class ChecksumError(GridFedError):
    """A checkpoint payload failed integrity verification."""
