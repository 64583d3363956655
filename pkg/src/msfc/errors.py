"""Exception types shared across the package."""


class MsfcError(Exception):
    """Base class for all package errors."""


class ConfigError(MsfcError):
    """Invalid configuration: bad shapes, bad hyperparameters, unknown keys."""


class InputError(MsfcError):
    """Malformed or degenerate input data (empty clouds, too few rows, ...)."""


class ParseError(MsfcError):
    """A file could not be parsed; message carries the offending line number."""


class ProtocolError(MsfcError):
    """Violation of the incremental-learning protocol contract."""


class FreezeViolationError(MsfcError):
    """An optimizer step was attempted on frozen parameters."""


class NumericError(MsfcError):
    """Non-finite values where finite ones are required."""


class ProvenanceError(MsfcError):
    """Artifacts from different pipeline runs were mixed (checksum mismatch)."""
