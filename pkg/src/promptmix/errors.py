"""Exception types shared across the package."""


class PromptMixError(Exception):
    """Base class for all promptmix errors."""


class ShapeError(PromptMixError, ValueError):
    """Operands have incompatible or unexpected dimensions."""


class HyperparameterError(PromptMixError, ValueError):
    """A hyperparameter or config value is outside its valid range."""


class InvalidInputError(PromptMixError, ValueError):
    """An input violates an operation's precondition (empty, non-finite, ...)."""


class DegenerateVectorError(PromptMixError, ValueError):
    """A vector with (near-)zero norm where a direction is required."""


class DistributionError(PromptMixError, ValueError):
    """A vector that should be a probability distribution is not."""


class TemplateError(PromptMixError, ValueError):
    """A hard-prompt template or template document failed to parse.

    Carries ``line`` (1-based line number in the source document) when the
    error originates from a document rather than a single template string.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DatasetError(PromptMixError, ValueError):
    """Dataset contents cannot satisfy the request (too few examples, ...)."""


class DatasetFormatError(DatasetError):
    """A dataset file is malformed or has an unsupported version."""


class CheckpointFormatError(PromptMixError, ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class MetricError(PromptMixError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero accuracy)."""


class NumericAbort(PromptMixError, RuntimeError):
    """Training hit a non-finite loss; carries a diagnostic payload."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
