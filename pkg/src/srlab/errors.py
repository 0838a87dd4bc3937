"""Shared exception types.

The split mirrors how callers should react: ConfigurationError means the
caller wired things up wrong (bad shapes, bad config values), ValidationError
means the data or arguments violate a documented precondition, ContractViolation
means an internal guarantee was broken, ParseError carries file/line context,
and TrainingError wraps a diverged optimization with its diagnostics attached.
"""


class SRLabError(Exception):
    """Base class for all srlab errors."""


class ConfigurationError(SRLabError):
    pass


class ValidationError(SRLabError):
    pass


class ContractViolation(SRLabError):
    pass


class ParseError(SRLabError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(SRLabError):
    def __init__(self, message: str, diagnostics=None):
        self.diagnostics = diagnostics
        super().__init__(message)
