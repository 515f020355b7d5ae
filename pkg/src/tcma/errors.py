"""Exception hierarchy shared across the package."""


class TcmaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TcmaError, ValueError):
    """Operands have incompatible or unsupported shapes."""


class DomainError(TcmaError, ValueError):
    """A numeric argument lies outside the operation's domain."""


class EmptyInputError(TcmaError, ValueError):
    """An operation received an empty input it cannot reduce."""


class GraphError(TcmaError, ValueError):
    """A differentiation-graph contract was violated (e.g. non-scalar root)."""


class ConfigError(TcmaError, ValueError):
    """Invalid configuration detected at startup."""


class CorpusError(TcmaError):
    """Base class for corpus loading/validation problems."""


class CorpusFormatError(CorpusError):
    """A file is structurally malformed (bad magic, truncated, invalid JSON...)."""


class CorpusValidationError(CorpusError):
    """Files parse but violate the corpus contract (dangling ids, bad shapes...)."""


class TrainingDivergedError(TcmaError):
    """Training produced a non-finite loss; carries the per-level breakdown."""

    def __init__(self, message: str, breakdown: dict | None = None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})
