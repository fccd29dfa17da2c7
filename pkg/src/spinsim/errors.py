"""Exception hierarchy shared by all spinsim modules."""


class SpinSimError(Exception):
    """Base class; ``category`` is the machine-readable tag the CLI reports."""

    category = "error"


class DomainError(SpinSimError, ValueError):
    category = "domain"


class ModelError(SpinSimError):
    """The rate model is ill-posed (dark, disconnected, negative rates)."""

    category = "model"


class UnderdeterminedError(SpinSimError, ValueError):
    category = "underdetermined"


class ConfigError(SpinSimError, ValueError):
    category = "config"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IngestError(SpinSimError, ValueError):
    category = "ingest"
