class FevitWarning(Warning):
    """Base warning for fevit"""
    pass


class FevitError(Exception):
    """Base exception for fevit"""
    pass


class ConfigError(FevitError):
    """Error raised when a configuration value or file is invalid"""
    pass


class ShapeError(FevitError):
    """Error raised when tensor shapes are incompatible with an operation"""
    pass


class LabelError(FevitError):
    """Error raised when a class label is outside of [0, num_classes)"""
    pass


class GraphConsumedError(FevitError):
    """Error raised when backward is run twice through the same graph"""
    pass


class GradCheckError(FevitError):
    """Error raised when a gradient check encounters a non-finite value or runs in the wrong precision"""
    pass


class MissingGroupError(FevitError):
    """Error raised when a parameter group required by a forward mode is absent"""
    pass


class TemporalLengthError(FevitError):
    """Error raised when the number of frames does not match the temporal positional embedding table"""
    pass


class InterpolationError(FevitError):
    """Error raised when a positional embedding table cannot be resampled"""
    pass


class CheckpointError(FevitError):
    """Base error for reading and writing SFAV1 checkpoints"""
    pass


class CheckpointCorruptError(CheckpointError):
    """Error raised when a checkpoint stream cannot be decoded (e.g., it was truncated)"""
    pass


class CheckpointMagicError(CheckpointCorruptError):
    """Error raised when a stream does not start with the SFAV1 magic bytes"""
    pass


class CheckpointVersionError(CheckpointCorruptError):
    """Error raised when the format version is not supported"""
    pass


class RecordLengthError(CheckpointCorruptError):
    """Error raised when a record's shape does not match the number of stored values"""
    pass


class UnknownGroupError(CheckpointCorruptError):
    """Error raised when a record cannot be assigned to a parameter group"""
    pass


class CheckpointIOError(CheckpointError):
    """Error raised when a checkpoint file cannot be read or written"""
    pass


class SurgeryError(FevitError):
    """Error raised when a Stage-1 checkpoint is incompatible with the Stage-2 target"""
    pass


class MissingSourceError(FevitError):
    """Error raised when an initialization source required by an ablation variant is missing"""
    pass


class MissingGradientError(FevitError):
    """Error raised when a trainable parameter did not receive a gradient (broken graph)"""
    pass


class FreezeViolationError(FevitError):
    """Error raised if a frozen parameter group changed during training"""
    pass


class NonFiniteLossError(FevitError):
    """Error raised when a training step produces a NaN or infinite loss"""
    pass


class FrameCountError(FevitError):
    """Error raised when the requested number of frames is incompatible with the data or model"""
    pass


class PipelineError(FevitError):
    """Error raised when a training pipeline refers to a source that does not exist"""
    pass
