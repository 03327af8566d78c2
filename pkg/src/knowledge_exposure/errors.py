"""Exception hierarchy shared by every pipeline stage."""


class KnowledgeExposureError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(KnowledgeExposureError):
    """An unknown identifier or inconsistent configuration value."""


class ValidationError(KnowledgeExposureError, ValueError):
    """Input data violates a documented precondition."""


class NumericalError(KnowledgeExposureError, ArithmeticError):
    """Non-finite values or a solver that failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class InitializationError(KnowledgeExposureError):
    """An encoder backend (or its weights) could not be loaded."""


class ChecksumError(KnowledgeExposureError):
    """A cached artifact does not match its recorded checksum."""


class ParseError(KnowledgeExposureError, ValueError):
    """A text input (overrides file, config) is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
