from __future__ import annotations


class ConfigError(ValueError):
    """Invalid experiment configuration or parameter range."""

    def __init__(self, message: str, field: str | None = None) -> None:
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class OracleError(RuntimeError):
    """A numerical reference solver failed to converge."""


class DivergenceError(RuntimeError):
    """The global model left the finite/bounded region during a run.

    ``trace`` holds everything recorded up to the failing round.
    """

    def __init__(self, message: str, trace=None) -> None:
        super().__init__(message)
        self.trace = trace
