# Exceptions raised across the library. The CLI maps them to exit codes.


class CCLError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(CCLError, ValueError):
    """Tensor shapes do not agree with what an operation requires"""


class NonFiniteError(CCLError, FloatingPointError):
    """A kernel produced NaN or Inf"""


class LabelError(CCLError, ValueError):
    """Targets are not valid one-hot rows"""


class ConfigError(CCLError, ValueError):
    """Configuration could not be parsed or validated"""


class DatasetFormatError(CCLError):
    """Dataset file has an unexpected header or magic number"""


class DatasetLengthError(CCLError):
    """Dataset file is truncated or its size does not match the record layout"""


class DatasetMissingError(CCLError, FileNotFoundError):
    """Dataset files are not present under the data root"""


class CheckpointError(CCLError):
    """Checkpoint file is malformed"""


class ArchitectureMismatchError(CCLError):
    """A checkpoint does not fit the dataset or command it was used with"""


class TrainingDivergedError(CCLError):
    """A training step produced a non-finite loss or activation"""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step
        self.detail = detail
