"""
Exception hierarchy for gatedbev.

Every failure that can end a CLI command derives from GatedBevError and
carries the process exit code the command reports.
"""


class GatedBevError(Exception):
    exit_code = 1


class ConfigError(GatedBevError):
    """Invalid or unknown configuration, or a violated command precondition."""
    exit_code = 3


class DatasetError(GatedBevError):
    exit_code = 4


class DatasetWriteError(DatasetError):
    """The output directory cannot be written."""


class DatasetCorruptError(DatasetError):
    """A dataset file is missing, truncated or unparsable."""


class SchemaVersionError(DatasetError):
    """The manifest declares a schema this reader does not understand."""


class TokenCollisionError(DatasetError):
    """Two samples share a token."""


class CheckpointError(GatedBevError):
    exit_code = 4


class NumericAbortError(GatedBevError):
    """Training produced a non-finite loss."""
    exit_code = 5

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Non-finite loss {loss} at epoch {epoch}; training aborted")
        self.epoch = epoch
        self.loss = loss


class ShapeMismatchError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


class OutputError(GatedBevError):
    """A command output directory or file cannot be written."""
    exit_code = 4
