"""Exception types shared across the package."""


class DomexError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(DomexError):
    """An argument or field violates a documented contract."""


class EmptyRequestError(ValidationError):
    """A sampling operation was asked for zero items."""


class UnsupportedOracleError(DomexError):
    """A closed-form risk was requested outside its analytic domain."""


class ResourceLimitError(DomexError):
    """Exact enumeration was requested beyond the hard size cap."""


class DivergenceError(DomexError):
    """Gradient training produced a non-finite update."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite gradient at step {step}")


class ParseError(DomexError):
    """A backend response could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw: str):
        self.raw = raw
        super().__init__(f"{message}; raw text: {raw!r}")


class BackendError(DomexError):
    """A chat, image, or embedding backend failed after retries."""


class StageError(DomexError):
    """A pipeline stage failed part-way; carries stage context."""

    def __init__(self, message: str, *, stage: str = "", completed: int = 0):
        self.stage = stage
        self.completed = completed
        super().__init__(message)


class DomainShortfallError(StageError):
    """Deduplication-with-refill could not reach the requested count."""


class ConfigError(DomexError):
    """Run configuration is malformed or contains unknown keys."""


class MissingArtifactError(DomexError):
    """A prerequisite artifact is absent; names the expected path."""

    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing prerequisite artifact: {path}")


class OverwriteRefusedError(DomexError):
    """An output exists with different content and --force was not given."""

    def __init__(self, path):
        self.path = str(path)
        super().__init__(
            f"refusing to overwrite {path} (content differs); pass --force to replace"
        )
