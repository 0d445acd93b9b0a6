"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CertkitError(Exception):
    exit_code = 1


class ConfigError(CertkitError, ValueError):
    exit_code = 3


class ValidationError(CertkitError, ValueError):
    exit_code = 3


class DimensionError(ValidationError):
    pass


class FormatError(CertkitError):
    """Malformed binary file; ``offset`` is the byte position where parsing failed."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class NumericError(CertkitError, ArithmeticError):
    exit_code = 5


class StateError(CertkitError, RuntimeError):
    exit_code = 5


class FitError(ValidationError):
    pass


class ProvenanceError(ValidationError):
    pass
