"""Exception types raised across tune-mbrl."""


class TuneError(Exception):
    """Base class for all tune-mbrl errors."""


class ConfigError(TuneError):
    """Invalid configuration, search space or command-line input."""


class ValidationError(ConfigError):
    """A configuration does not match its parameter space."""


class InvalidBudget(ConfigError):
    """Hyperband budgets are inconsistent (b_min > b_max or non-positive)."""


class ResumeMismatch(ConfigError):
    """The persisted run was started with a different configuration."""


class NumericalOverflow(TuneError):
    """A trial produced a non-finite return or state."""


class NonFiniteLoss(NumericalOverflow):
    """Model training diverged."""


class NonFiniteInput(TuneError):
    """A model was queried with non-finite inputs."""


class DimensionMismatch(TuneError):
    """Array dimensions do not agree."""


class CheckpointError(TuneError):
    """Base class for checkpoint decoding errors."""


class CorruptCheckpoint(CheckpointError):
    """Checkpoint bytes are malformed."""


class VersionMismatch(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class EmptyHistory(TuneError):
    """No returns have been recorded yet."""


class DegenerateVariance(TuneError):
    """CEM was asked to iterate a distribution that can never move."""


class InsufficientOverlap(TuneError):
    """Fewer than two configurations were evaluated at both budgets."""


class EmptyLog(TuneError):
    """The run log holds no trial records."""


class EmptyWindow(TuneError):
    """No transitions are available for evaluation."""


class EmptyDataset(TuneError):
    """A model was asked to train on no transitions."""


class WorkerCrash(TuneError):
    """A worker process died while training a member."""


class PopulationTooSmall(UserWarning):
    """Truncation selects nobody; the exploit step is skipped."""
