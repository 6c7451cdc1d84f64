"""Exception types shared across the package."""


class PercganError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PercganError):
    """Invalid or inconsistent configuration."""


class LoadError(PercganError):
    """A weights container or descriptor file could not be loaded."""


class DataError(PercganError):
    """A dataset directory or image set violates its contract."""


class ShapeError(PercganError):
    """Tensor shapes violate an operation's contract."""


class NumericError(PercganError):
    """Non-finite values where finite ones are required."""


class PartitionError(PercganError):
    """Block boundaries do not respect the trunk's halving structure."""


class SurgeryError(PercganError):
    """Invalid surgery request (e.g. applying it twice)."""


class CheckpointError(PercganError):
    """Checkpoint container is unreadable or inconsistent with the config."""


class DivergenceError(PercganError):
    """Training produced a non-finite loss and was aborted.

    Carries the name of the offending loss term and, when available, the path
    of the last checkpoint written before the abort.
    """

    def __init__(self, term: str, last_checkpoint=None):
        self.term = term
        self.last_checkpoint = last_checkpoint
        where = f" (last checkpoint: {last_checkpoint})" if last_checkpoint else ""
        super().__init__(f"non-finite value in loss term '{term}'{where}")
