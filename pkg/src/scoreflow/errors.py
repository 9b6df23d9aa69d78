"""Exception hierarchy shared across the package."""


class ScoreFlowError(Exception):
    pass


class ConfigurationError(ScoreFlowError, ValueError):
    pass


class ShapeError(ScoreFlowError, ValueError):
    pass


class DomainError(ScoreFlowError, ValueError):
    pass


class NonFiniteError(ScoreFlowError, FloatingPointError):
    """Raised when a NaN/inf shows up where finite values are required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UsageError(ScoreFlowError, RuntimeError):
    pass


class CheckpointError(ScoreFlowError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class TrainingDiverged(NonFiniteError):
    """Training hit a non-finite loss; ``params`` holds the last finite parameters."""

    def __init__(self, message, params=None, index=None):
        super().__init__(message, index)
        self.params = params
