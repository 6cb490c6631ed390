"""Exception types shared across the package."""


class IncrelabError(Exception):
    """Base class for all package-specific errors."""


class ParseError(IncrelabError):
    """Malformed corpus input."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyCorpusError(ParseError):
    """Input contained no sentences."""


class ConfigurationError(IncrelabError):
    """Invalid configuration value or combination."""


class ContractError(IncrelabError):
    """A caller violated an operation precondition."""


class TrainingError(IncrelabError):
    """Training cannot proceed (bad data or diverged parameters)."""


class ProtocolError(IncrelabError):
    """Incremental steps executed out of order."""


class MissingClassError(IncrelabError):
    """A requested class has no data or no exemplars."""


class InsufficientExemplarsError(IncrelabError):
    """An operation needs more exemplars than the memory holds."""
