"""Exception types shared across the package."""


class ModelServeError(Exception):
    """Base class for all modelserve errors."""


class DimensionMismatch(ModelServeError):
    """A vector or matrix does not conform to the model dimension."""


class UnknownItem(ModelServeError, KeyError):
    """Materialized feature lookup missed."""


class UnknownUser(ModelServeError, KeyError):
    """An observation references a user absent from the weight table."""


class UnknownModel(ModelServeError, KeyError):
    """No model registered under the requested name."""


class UnknownVersion(ModelServeError, KeyError):
    """Rollback target is not retained in the version history."""


class EmptyLog(ModelServeError):
    """Retraining was requested on an empty observation log."""


class RetrainInFlight(ModelServeError):
    """A retrain job is already running for this model."""


class ParseError(ModelServeError):
    """A ratings file line could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class IoFailure(ModelServeError):
    """A storage operation failed; the in-memory update must not be applied."""


class ChecksumMismatch(ModelServeError):
    """Stored bytes fail integrity verification."""
