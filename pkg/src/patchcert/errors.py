"""Exception types shared across the package."""


class PatchCertError(Exception):
    """Base class for all package errors."""


class ConfigError(PatchCertError, ValueError):
    """Invalid model geometry, layer index or run parameter."""


class StateError(PatchCertError, RuntimeError):
    """An operation was called on an object in the wrong state."""


class FormatError(PatchCertError, ValueError):
    """Malformed weight or tensor container."""


class DataError(PatchCertError, ValueError):
    """Dataset file could not be decoded."""


class NumericalError(PatchCertError, FloatingPointError):
    """A loss or objective became non-finite."""
