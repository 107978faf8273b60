"""Exception types raised across the package."""


class HisTPTError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(HisTPTError, ValueError):
    """A vector or prototype row has zero norm, so cosine similarity is undefined."""


class ConfigurationError(HisTPTError, ValueError):
    """A hyperparameter or stream setting is out of range or inconsistent."""


class UsageError(HisTPTError, ValueError):
    """An operation was called with mismatched shapes or an empty input."""


class ParseError(HisTPTError, ValueError):
    """A file on disk does not follow the expected format."""


class StepError(HisTPTError):
    """A tuning step failed; carries the index of the offending sample."""

    def __init__(self, index, cause, partial=None):
        super().__init__(f"sample {index}: {cause}")
        self.index = index
        self.cause = cause
        # metrics over the samples processed before the failure, if available
        self.partial = partial
