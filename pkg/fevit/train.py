"""Momentum SGD with a warmup-cosine schedule, the epoch loop, evaluation and chained training runs."""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import backward, cross_entropy, no_grad
from .checkpoint import Checkpoint, make_meta, read_file
from .dataset import DatasetSpec, batch_iter, frame_indices, load_split, prefetch, steps_per_epoch
from .errors import (
    ConfigError,
    FevitError,
    FrameCountError,
    FreezeViolationError,
    MissingGradientError,
    NonFiniteLossError,
    PipelineError,
    ShapeError,
    TemporalLengthError,
)
from .model import MODES, FactorisedEncoder, FEModelConfig, ParamStore, init_params
from .surgery import HEAD_POLICIES, spatial_transfer_init, surgery_full_init, surgery_stage2_init
from .utils import stable_hash

logger = logging.getLogger(__name__)

SCHEDULES = ('warmup_cosine', )
EvalData = Union[DatasetSpec, Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings of one run.

    :param epochs: passes over the train split
    :param local_batch: clips per step
    :param base_lr: peak learning rate
    :param momentum: SGD momentum
    :param warmup_epochs: length of the linear warmup
    :param schedule: learning rate schedule
    :param seed: seed for shuffling (and for initialization in pipelines)
    :param eval_every: evaluate every this many steps (0: only at the end)
    :param label_smoothing: label smoothing of the cross-entropy loss
    :param prefetch_depth: batches prepared ahead on a worker thread (0: none)
    :param eval_batch: clips per evaluation forward pass
    """
    epochs: int = 10
    local_batch: int = 16
    base_lr: float = 0.05
    momentum: float = 0.9
    warmup_epochs: float = 2.5
    schedule: str = 'warmup_cosine'
    seed: int = 0
    eval_every: int = 0
    label_smoothing: float = 0.0
    prefetch_depth: int = 2
    eval_batch: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f'epochs must be non-negative, got {self.epochs}')
        if self.local_batch < 1 or self.eval_batch < 1:
            raise ConfigError(f'Batch sizes must be positive, got {self.local_batch} / {self.eval_batch}')
        if self.base_lr <= 0:
            raise ConfigError(f'base_lr must be positive, got {self.base_lr}')
        if not 0 <= self.momentum < 1:
            raise ConfigError(f'momentum must be in [0, 1), got {self.momentum}')
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ConfigError(f'warmup_epochs must be in [0, epochs), got {self.warmup_epochs} for {self.epochs} epochs')
        if self.schedule not in SCHEDULES:
            raise ConfigError(f'Unknown schedule {self.schedule!r}, expected one of {SCHEDULES}')
        if self.eval_every < 0:
            raise ConfigError(f'eval_every must be non-negative, got {self.eval_every}')
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f'label_smoothing must be in [0, 1), got {self.label_smoothing}')


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """
    Learning rate at <step>: linear warmup from 0 to base_lr, then half a cosine down to 0 at total_steps.

    :param step: step index, 0 <= step <= total_steps
    :param total_steps: steps of the whole run
    :param config: train config (base_lr, warmup_epochs, epochs)
    :return: learning rate
    """
    if not 0 <= step <= total_steps:
        raise ConfigError(f'Step {step} is outside [0, {total_steps}]')
    if total_steps == 0 or config.epochs == 0:
        return 0.0
    warmup_steps = config.warmup_epochs / config.epochs * total_steps
    if step < warmup_steps:
        return config.base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(store: ParamStore, lr: float, momentum_buffers: Dict[str, np.ndarray], momentum: float = 0.9) -> None:
    """
    Momentum SGD update (v <- momentum * v + g; w <- w - lr * v) of every trainable tensor.

    Buffers are created on first use and only for trainable tensors. Frozen tensors are not touched.
    Gradients are cleared afterwards.

    :param store: parameters with gradients from the last backward pass
    :param lr: learning rate
    :param momentum_buffers: velocity per record name, updated in place
    :param momentum: momentum coefficient
    """
    for group in store.trainable_groups():
        for name, tensor in store.tensors(group).items():
            if tensor.grad is None:
                raise MissingGradientError(f"Trainable record '{name}' received no gradient")
    for group in store.trainable_groups():
        for name, tensor in store.tensors(group).items():
            assert tensor.grad is not None
            velocity = momentum_buffers.get(name)
            velocity = tensor.grad.copy() if velocity is None else momentum * velocity + tensor.grad
            momentum_buffers[name] = velocity
            tensor.data = (tensor.data - lr * velocity).astype(tensor.data.dtype, copy=False)
    store.zero_grad()


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float


@dataclass
class EvalRecord:
    epoch: float
    top1: float
    top5: float
    wall_seconds: float
    steps: int


@dataclass
class RunMetrics:
    """Everything measured during one run. Accuracies are percentages."""
    steps: List[StepRecord] = field(default_factory=list)
    evals: List[EvalRecord] = field(default_factory=list)
    grad_param_counts: Dict[str, int] = field(default_factory=dict)
    step_times: List[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def mean_step_time(self) -> float:
        return float(np.mean(self.step_times)) if self.step_times else 0.0

    @property
    def grad_param_count(self) -> int:
        return sum(self.grad_param_counts.values())

    @property
    def final_top1(self) -> float:
        return self.evals[-1].top1 if self.evals else float('nan')

    @property
    def final_top5(self) -> float:
        return self.evals[-1].top5 if self.evals else float('nan')

    def is_empty(self) -> bool:
        return not self.steps and not self.evals


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """
    Whether each true label is among the k largest logits. Ties rank the lower class index first.

    :param logits: [N, C]
    :param labels: [N]
    :param k: clamped to C
    :return: boolean array [N]
    """
    k = min(k, logits.shape[1])
    ranking = np.argsort(-logits, axis=1, kind='stable')[:, :k]
    return np.any(ranking == np.asarray(labels)[:, None], axis=1)


def evaluate(model: FactorisedEncoder, store: ParamStore, data: EvalData, batch: int = 64) -> Tuple[float, float]:
    """
    Top-1 and top-5 accuracy (percent) with a single uniformly subsampled clip per video.

    :param model: model to evaluate
    :param store: parameters
    :param data: dataset spec (its eval split is used) or preloaded (videos, labels)
    :param batch: clips per forward pass
    :return: top1, top5
    """
    if isinstance(data, DatasetSpec):
        videos, labels = load_split(data, 'eval', model.config.num_frames)
    else:
        videos, labels = data
    if len(labels) == 0:
        raise ConfigError('Cannot evaluate on an empty split')
    top1 = top5 = 0
    with no_grad():
        for start in range(0, len(labels), batch):
            logits = model(videos[start:start + batch], store).numpy()
            top1 += int(topk_hits(logits, labels[start:start + batch], 1).sum())
            top5 += int(topk_hits(logits, labels[start:start + batch], 5).sum())
    return 100.0 * top1 / len(labels), 100.0 * top5 / len(labels)


def near_peak_index(top1s: Sequence[float], margin: float = 1.0) -> int:
    """Index of the first value within <margin> of the maximum."""
    if len(top1s) == 0:
        raise FevitError('Near-peak detection needs at least one evaluation point')
    threshold = max(top1s) - margin
    return next(i for i, value in enumerate(top1s) if value >= threshold)


def _evals(metrics: Union[RunMetrics, Sequence[EvalRecord]]) -> Sequence[EvalRecord]:
    return metrics.evals if isinstance(metrics, RunMetrics) else metrics


def near_peak_epoch(metrics: Union[RunMetrics, Sequence[EvalRecord]], margin: float = 1.0) -> float:
    """
    Epoch of the first evaluation whose top1 is at least (best top1 - margin).

    :param metrics: run metrics or evaluation records
    :param margin: percentage points
    :return: epoch
    """
    evals = _evals(metrics)
    return evals[near_peak_index([e.top1 for e in evals], margin)].epoch


def best_epoch(metrics: Union[RunMetrics, Sequence[EvalRecord]]) -> float:
    """Epoch of the first evaluation with the highest top1."""
    evals = _evals(metrics)
    return evals[near_peak_index([e.top1 for e in evals], margin=0.0)].epoch


def _check_compatible(model: FactorisedEncoder, store: ParamStore, data: DatasetSpec) -> None:
    config = model.config
    if data.task == 'image':
        if config.num_frames != 1:
            raise FrameCountError(f'Image datasets provide single frames, the model expects {config.num_frames}')
    else:
        frame_indices(data.source_frames, config.num_frames)
    if (data.image_size, data.channels) != (config.image_size, config.channels):
        raise ShapeError(f'Dataset frames {(data.image_size, data.channels)} do not match the model '
                         f'{(config.image_size, config.channels)}')
    if data.num_classes != config.num_classes:
        raise ConfigError(f'Dataset has {data.num_classes} classes, the model {config.num_classes}')
    if 'temporal/posemb' in store and model.mode != 'mean_pool':
        length = store['temporal/posemb'].shape[0]
        if length != config.num_frames:
            raise TemporalLengthError(f'Model expects {config.num_frames} frames but the temporal positional '
                                      f'embedding has {length} entries')


def run_stage(
    model: FactorisedEncoder,
    store: ParamStore,
    data: DatasetSpec,
    train_config: TrainConfig,
    freeze_flags: Optional[Dict[str, bool]] = None,
) -> RunMetrics:
    """
    Train <store> in place for train_config.epochs epochs and evaluate on the eval split.

    :param model: model (architecture and forward mode)
    :param store: parameters, updated in place
    :param data: dataset
    :param train_config: optimization settings
    :param freeze_flags: group freeze flags to apply before training (None keeps the store's flags)
    :return: metrics
    """
    _check_compatible(model, store, data)
    if freeze_flags is not None:
        store.apply_freeze_flags(freeze_flags)
    frozen = {g: store.snapshot(g) for g in store.frozen_groups()}

    metrics = RunMetrics()
    if train_config.epochs == 0:
        return metrics

    per_epoch = steps_per_epoch(data, train_config.local_batch)
    if per_epoch == 0:
        raise ConfigError(f'Train split of {data.split_size("train")} clips is smaller than one batch '
                          f'of {train_config.local_batch}')
    total_steps = per_epoch * train_config.epochs
    frames = model.config.num_frames
    eval_data = load_split(data, 'eval', frames)
    buffers: Dict[str, np.ndarray] = {}
    logger.info(f'Training {model} for {train_config.epochs} epochs ({total_steps} steps), '
                f'frozen: {store.frozen_groups()}')

    def run_eval(step: int) -> None:
        top1, top5 = evaluate(model, store, eval_data, train_config.eval_batch)
        record = EvalRecord(epoch=step / per_epoch, top1=top1, top5=top5, wall_seconds=time.perf_counter() - start,
                            steps=step)
        metrics.evals.append(record)
        logger.info(f'epoch {record.epoch:.2f}: top1 {top1:.2f} top5 {top5:.2f} ({record.wall_seconds:.1f}s)')

    start = time.perf_counter()
    step = 0
    for epoch in range(train_config.epochs):
        batches = batch_iter(data, 'train', train_config.local_batch, frames, stable_hash(train_config.seed, epoch))
        for videos, labels in prefetch(batches, train_config.prefetch_depth):
            lr = lr_at(step, total_steps, train_config)
            step_start = time.perf_counter()
            loss = cross_entropy(model(videos, store), labels, train_config.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(f'Loss became {value} at step {step}')
            backward(loss)
            metrics.grad_param_counts = {
                g: sum(t.size for t in store.tensors(g).values() if t.grad is not None)
                for g in store.groups
            }
            sgd_step(store, lr, buffers, train_config.momentum)
            metrics.step_times.append(time.perf_counter() - step_start)

            metrics.steps.append(StepRecord(step=step, loss=value, lr=lr))
            logger.debug(f'step {step}: loss {value:.4f} lr {lr:.4g}')
            step += 1
            if train_config.eval_every and step % train_config.eval_every == 0:
                run_eval(step)
    if not metrics.evals or metrics.evals[-1].steps != step:
        run_eval(step)
    metrics.wall_seconds = time.perf_counter() - start

    for group, values in frozen.items():
        for name, before in values.items():
            if not np.array_equal(before, store[name].data):
                raise FreezeViolationError(f"Frozen record '{name}' of group '{group}' changed during training")
    return metrics


# Chained runs

STAGES = ('stage1', 'stage2', 'image', 'scratch')
SURGERIES = ('none', 'spatial', 'stage2', 'full')
InitSource = Union[None, str, Checkpoint]


@dataclass
class RunSpec:
    """
    One run of a pipeline.

    :param name: unique name; later runs refer to it through <init>
    :param model: architecture
    :param data: dataset
    :param train: optimization settings (train.seed also seeds fresh parameters)
    :param mode: forward mode
    :param stage: stage label stored in the checkpoint
    :param init: None (fresh parameters), the name of an earlier run, a checkpoint path or a Checkpoint
    :param surgery: how <init> is turned into parameters: 'none' (load as is), 'spatial' (spatial group
        only, rest fresh), 'stage2' (frozen spatial, identity adapter) or 'full' (nothing frozen, no adapter)
    :param head_policy: 'copy' or 'reinit' for surgeries
    :param freeze: freeze flags applied before training (None keeps those of the initialization)
    """
    name: str
    model: FEModelConfig
    data: DatasetSpec
    train: TrainConfig
    mode: str = 'baseline'
    stage: str = 'stage1'
    init: InitSource = None
    surgery: str = 'none'
    head_policy: str = 'copy'
    freeze: Optional[Dict[str, bool]] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f'Unknown mode {self.mode!r}, expected one of {MODES}')
        if self.stage not in STAGES:
            raise ConfigError(f'Unknown stage {self.stage!r}, expected one of {STAGES}')
        if self.surgery not in SURGERIES:
            raise ConfigError(f'Unknown surgery {self.surgery!r}, expected one of {SURGERIES}')
        if self.head_policy not in HEAD_POLICIES:
            raise ConfigError(f'Unknown head policy {self.head_policy!r}, expected one of {HEAD_POLICIES}')
        if self.surgery != 'none' and self.init is None:
            raise ConfigError(f"Run '{self.name}' uses surgery '{self.surgery}' without an initialization source")
        if self.surgery == 'stage2' and self.mode != 'sfa':
            raise ConfigError(f"Run '{self.name}': stage-2 surgery adds an adapter and needs mode 'sfa'")


@dataclass
class StageResult:
    name: str
    metrics: RunMetrics
    checkpoint: Checkpoint
    stage_seconds: float
    cumulative_seconds: float


@dataclass
class PipelineResult:
    results: List[StageResult] = field(default_factory=list)

    @property
    def checkpoints(self) -> Dict[str, Checkpoint]:
        return {r.name: r.checkpoint for r in self.results}

    @property
    def final(self) -> StageResult:
        return self.results[-1]

    def __getitem__(self, name: str) -> StageResult:
        for result in self.results:
            if result.name == name:
                return result
        raise KeyError(name)


def _resolve_sources(specs: Sequence[RunSpec]) -> None:
    seen = set()
    for spec in specs:
        if spec.name in seen:
            raise PipelineError(f"Duplicate run name '{spec.name}'")
        if isinstance(spec.init, str) and spec.init not in seen and not Path(spec.init).is_file():
            raise PipelineError(f"Run '{spec.name}' refers to '{spec.init}', which is neither an earlier run "
                                'nor a checkpoint file')
        seen.add(spec.name)


def init_store(spec: RunSpec, source: Optional[Checkpoint]) -> ParamStore:
    """Parameters a run starts from."""
    seed = spec.train.seed
    if source is None:
        return init_params(spec.model, spec.mode, seed)
    if spec.surgery == 'spatial':
        return spatial_transfer_init(source, spec.model, spec.mode, seed)
    if spec.surgery == 'stage2':
        return surgery_stage2_init(source, spec.model, spec.head_policy, seed)
    if spec.surgery == 'full':
        return surgery_full_init(source, spec.model, spec.head_policy, seed)
    return source.to_store()


def run_pipeline(specs: Sequence[RunSpec]) -> PipelineResult:
    """
    Execute runs in order, each optionally initialized from an earlier run or a checkpoint.
    Every source reference is checked before the first run starts.

    :param specs: runs
    :return: metrics, checkpoints and stage-wise and cumulative wall times
    """
    _resolve_sources(specs)
    pipeline = PipelineResult()
    cumulative = 0.0
    for spec in specs:
        if isinstance(spec.init, Checkpoint):
            source: Optional[Checkpoint] = spec.init
        elif isinstance(spec.init, str):
            source = pipeline[spec.init].checkpoint if spec.init in pipeline.checkpoints else read_file(spec.init)
        else:
            source = None

        started = time.perf_counter()
        store = init_store(spec, source)
        model = FactorisedEncoder(spec.model, spec.mode)
        metrics = run_stage(model, store, spec.data, spec.train, spec.freeze)
        stage_seconds = time.perf_counter() - started
        cumulative += stage_seconds

        meta = make_meta(spec.model, spec.stage, epoch=spec.train.epochs, dataset_seed=spec.data.seed, mode=spec.mode)
        pipeline.results.append(
            StageResult(name=spec.name,
                        metrics=metrics,
                        checkpoint=Checkpoint.from_store(store, meta),
                        stage_seconds=stage_seconds,
                        cumulative_seconds=cumulative))
        logger.info(f"Run '{spec.name}' finished in {stage_seconds:.1f}s (cumulative {cumulative:.1f}s), "
                    f'top1 {metrics.final_top1:.2f}')
    return pipeline
