"""Exception hierarchy shared across the package."""


class StreamTermError(Exception):
    """Base class for all package errors."""


class ConfigError(StreamTermError, ValueError):
    """Invalid run or window configuration."""


class GlossaryFormatError(StreamTermError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DuplicateTermError(GlossaryFormatError):
    pass


class MissingTranslationError(StreamTermError, KeyError):
    def __init__(self, term: str, lang: str):
        self.term = term
        self.lang = lang
        super().__init__(f"no {lang!r} translation for term {term!r}")

    def __str__(self) -> str:
        return self.args[0]


class DimensionError(StreamTermError, ValueError):
    pass


class DegenerateVectorError(StreamTermError, ValueError):
    pass


class EmbeddingError(StreamTermError):
    """Provider failed to embed an input."""


class RetryableEmbeddingError(EmbeddingError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class IndexingError(StreamTermError):
    def __init__(self, term: str, cause: Exception):
        self.term = term
        super().__init__(f"failed to embed term {term!r}: {cause}")


class PolicyError(StreamTermError):
    pass


class SessionAborted(StreamTermError):
    """A session stopped early; ``steps`` holds the partial log."""

    def __init__(self, message: str, steps: list):
        self.steps = steps
        super().__init__(message)


class SchemaVersionError(StreamTermError, ValueError):
    pass
