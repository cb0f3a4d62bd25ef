from importlib.metadata import PackageNotFoundError, version

from .autodiff import Tensor, backward, grad_check, no_grad, precision, set_precision
from .checkpoint import Checkpoint, load, load_file, save, save_file
from .cost import estimate_cost, max_feasible_frames
from .dataset import DatasetSpec, batch_iter, make_clip, make_frame
from .errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointIOError,
    CheckpointMagicError,
    CheckpointVersionError,
    ConfigError,
    FevitError,
    FevitWarning,
    FrameCountError,
    FreezeViolationError,
    GradCheckError,
    GraphConsumedError,
    InterpolationError,
    LabelError,
    MissingGradientError,
    MissingGroupError,
    MissingSourceError,
    NonFiniteLossError,
    PipelineError,
    RecordLengthError,
    ShapeError,
    SurgeryError,
    TemporalLengthError,
    UnknownGroupError,
)
from .model import FactorisedEncoder, FEModelConfig, ParamStore, init_params, preset_config
from .surgery import InitSources, ablation_init, surgery_full_init, surgery_stage2_init
from .train import RunSpec, TrainConfig, evaluate, lr_at, near_peak_epoch, run_pipeline, run_stage, sgd_step
from .utils import setup_logger

__all__ = [
    'Tensor', 'backward', 'grad_check', 'no_grad', 'precision', 'set_precision', 'Checkpoint', 'save', 'load',
    'save_file', 'load_file', 'estimate_cost', 'max_feasible_frames', 'DatasetSpec', 'make_clip', 'make_frame',
    'batch_iter', 'FEModelConfig', 'FactorisedEncoder', 'ParamStore', 'init_params', 'preset_config', 'InitSources',
    'ablation_init', 'surgery_stage2_init', 'surgery_full_init', 'RunSpec', 'TrainConfig', 'lr_at', 'sgd_step',
    'run_stage', 'evaluate', 'near_peak_epoch', 'run_pipeline', 'setup_logger', 'FevitError', 'FevitWarning',
    'ConfigError', 'ShapeError', 'LabelError', 'GraphConsumedError', 'GradCheckError', 'MissingGroupError',
    'TemporalLengthError', 'InterpolationError', 'CheckpointError', 'CheckpointCorruptError', 'CheckpointMagicError',
    'CheckpointVersionError', 'RecordLengthError', 'UnknownGroupError', 'CheckpointIOError', 'SurgeryError',
    'MissingSourceError', 'MissingGradientError', 'FreezeViolationError', 'NonFiniteLossError', 'FrameCountError',
    'PipelineError'
]

try:
    __version__ = version("fevit")
except PackageNotFoundError:
    # package is not installed
    pass
