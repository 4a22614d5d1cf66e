"""
Module: errors.py
Description: Exception hierarchy shared by the simulator packages.

Every exception carries the process exit code the command line reports for it:
0 success, 1 verification failure, 2 configuration error, 3 numerical divergence.

Classes:
    PromptFolioError: Base class of all simulator errors.
    ConfigError: Invalid or unreadable run configuration.
    DimensionError: Vector or matrix dimensions do not agree.
    InvalidParameterError: A scalar parameter is outside its valid range.
    UnknownClientError: A client id outside the federation.
    EmptyDataError: An operation received an empty dataset or batch.
    DegenerateModelError: A closed form is undefined for the given inputs.
    DivergenceError: Training produced a prompt above the norm bound.
    VerificationError: A verification property failed.
"""


class PromptFolioError(Exception):
    """
    Base class of all simulator errors.

    Attributes:
        exit_code (int): Exit code reported by the command line.
    """

    exit_code = 1


class ConfigError(PromptFolioError):
    """
    Raised when a run configuration is missing a field, has an unknown field,
    or holds a value outside its valid range.

    Attributes:
        field (str | None): The offending configuration key.
        line (int | None): Line of a JSON syntax error, if any.
    """

    exit_code = 2

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line

    def __str__(self) -> str:
        location = []
        if self.line is not None:
            location.append(f"line {self.line}")
        if self.field is not None:
            location.append(f"field '{self.field}'")
        prefix = ", ".join(location)
        return f"{prefix}: {self.args[0]}" if prefix else str(self.args[0])


class DimensionError(PromptFolioError, ValueError):
    """Raised when vector or matrix dimensions do not agree."""


class InvalidParameterError(PromptFolioError, ValueError):
    """Raised for norms, standard deviations, coefficients or labels outside their range."""


class UnknownClientError(PromptFolioError, KeyError):
    """Raised when a client id is not part of the assignment."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown client"


class EmptyDataError(PromptFolioError, ValueError):
    """Raised when a dataset or batch has no samples."""


class DegenerateModelError(PromptFolioError, ValueError):
    """Raised when a closed form has a zero denominator or an undefined value."""


class DivergenceError(PromptFolioError):
    """Raised when a prompt norm exceeds the configured divergence bound."""

    exit_code = 3


class VerificationError(PromptFolioError):
    """
    Raised when a verification suite has a failing property.

    Attributes:
        property_name (str): Name of the first failing property.
    """

    exit_code = 1

    def __init__(self, message: str, property_name: str = ""):
        super().__init__(message)
        self.property_name = property_name
