"""Experiment configuration and metric, table and manifest writers."""

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..dataset import IMAGE_GRID, DatasetSpec
from ..errors import ConfigError, FevitError, FevitWarning
from ..model import FEModelConfig
from ..train import RunMetrics, TrainConfig
from ..utils import PathType, coerce_values, config_hash, format_conf_text, parse_conf_file

METRIC_FORMATS = ('csv', 'jsonl', 'both')
STEP_FIELDS = ('step', 'loss', 'lr')
EVAL_FIELDS = ('epoch', 'top1', 'top5', 'wall_seconds')


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Flat experiment configuration, read from a "key = value" file and overridden by command line flags.
    Defaults are the desk-scale settings; the epoch budgets of the presets are the *_epochs fields.
    """
    seed: int = 0
    precision: str = 'f32'

    # single run
    stage: int = 1
    frames: int = 8
    epochs: int = 10
    init: Optional[str] = None
    head: str = 'copy'

    # model
    image_size: int = 32
    patch_size: int = 8
    spatial_depth: int = 4
    temporal_depth: int = 2
    hidden: int = 64
    heads: int = 4
    mlp_dim: int = 256
    adapter_hidden: Optional[int] = None

    # data
    dataset_seed: int = 0
    num_classes: int = 8
    train_clips_per_class: int = 64
    eval_clips_per_class: int = 32
    source_frames: int = 128
    noise_std: float = 0.05

    # optimization
    local_batch: int = 16
    base_lr: float = 0.05
    momentum: float = 0.9
    warmup_epochs: float = 2.5
    eval_every: int = 0
    label_smoothing: float = 0.0
    prefetch_depth: int = 2

    # preset budgets
    image_epochs: int = 6
    stage1_frames: int = 8
    stage1_epochs: int = 10
    stage2_frames: int = 16
    stage2_epochs: int = 6
    ablation_seeds: Tuple[int, ...] = (0, 1, 2)
    sweep_sources: Tuple[int, ...] = (2, 4, 8)
    headstart_epochs: int = 10
    headstart_unfrozen: bool = False
    curriculum_frames: Tuple[int, ...] = (4, 8, 16)
    curriculum_unit_epochs: int = 2
    control_epochs: int = 10
    cost_presets: Tuple[str, ...] = ('B', 'L', 'H', 'g')
    cost_budget_gib: float = 16.0
    cost_local_batch: int = 1

    metrics_format: str = 'csv'

    def __post_init__(self):
        if self.precision not in ('f32', 'f64'):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.stage not in (1, 2):
            raise ConfigError(f'stage must be 1 or 2, got {self.stage}')
        frame_fields = ['frames', 'stage1_frames', 'stage2_frames', 'source_frames']
        for name in frame_fields:
            if getattr(self, name) < 1:
                raise ConfigError(f'Frame count must be positive, got {name} = {getattr(self, name)}')
        for name, values in (('sweep_sources', self.sweep_sources), ('curriculum_frames', self.curriculum_frames)):
            if any(v < 1 for v in values):
                raise ConfigError(f'Frame count must be positive, got {name} = {values}')
        if len(self.curriculum_frames) != 3:
            raise ConfigError(f'curriculum_frames needs three entries (short, middle, long), got {self.curriculum_frames}')
        if not self.ablation_seeds:
            raise ConfigError('ablation_seeds must not be empty')
        if self.epochs < 0:
            raise ConfigError(f'epochs must be non-negative, got {self.epochs}')
        if self.head not in ('copy', 'reinit'):
            raise ConfigError(f"head must be 'copy' or 'reinit', got {self.head!r}")
        if self.metrics_format not in METRIC_FORMATS:
            raise ConfigError(f'metrics_format must be one of {METRIC_FORMATS}, got {self.metrics_format!r}')

    @classmethod
    def from_file(cls, path: PathType, **overrides: Any) -> 'ExperimentConfig':
        values = coerce_values(cls, parse_conf_file(path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def replace(self, **changes: Any) -> 'ExperimentConfig':
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return format_conf_text(dataclasses.asdict(self))

    @property
    def hash(self) -> str:
        return config_hash(self.to_text())

    def model_config(self, frames: int, num_classes: Optional[int] = None) -> FEModelConfig:
        return FEModelConfig(image_size=self.image_size,
                             patch_size=self.patch_size,
                             num_frames=frames,
                             spatial_depth=self.spatial_depth,
                             temporal_depth=self.temporal_depth,
                             hidden=self.hidden,
                             heads=self.heads,
                             mlp_dim=self.mlp_dim,
                             adapter_hidden=self.adapter_hidden,
                             num_classes=self.num_classes if num_classes is None else num_classes)

    def dataset_spec(self, task: str = 'video', seed: Optional[int] = None) -> DatasetSpec:
        return DatasetSpec(seed=self.dataset_seed if seed is None else seed,
                           num_classes=self.num_classes if task == 'video' else IMAGE_GRID[0] * IMAGE_GRID[1],
                           train_clips_per_class=self.train_clips_per_class,
                           eval_clips_per_class=self.eval_clips_per_class,
                           source_frames=self.source_frames,
                           image_size=self.image_size,
                           noise_std=self.noise_std,
                           task=task)

    def train_config(self, epochs: int, seed: Optional[int] = None, eval_every: Optional[int] = None) -> TrainConfig:
        warmup = self.warmup_epochs
        if epochs > 0 and warmup >= epochs:
            warmup = epochs / 4
            warnings.warn(f'warmup_epochs {self.warmup_epochs} does not fit a {epochs}-epoch run, using {warmup}',
                          FevitWarning)
        return TrainConfig(epochs=epochs,
                           local_batch=self.local_batch,
                           base_lr=self.base_lr,
                           momentum=self.momentum,
                           warmup_epochs=warmup,
                           seed=self.seed if seed is None else seed,
                           eval_every=self.eval_every if eval_every is None else eval_every,
                           label_smoothing=self.label_smoothing,
                           prefetch_depth=self.prefetch_depth)


def format_value(value: Any) -> Any:
    """Floats with 6 significant digits, everything else unchanged."""
    if isinstance(value, float):
        return f'{value:.6g}'
    return value


def _open(path: Path, what: str):
    try:
        return open(path, 'w', newline='')
    except OSError as e:
        raise FevitError(f"Cannot write {what} '{path}': {e}")


def write_csv(path: PathType, fields: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    with _open(path, 'CSV file') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(fields)
        for row in rows:
            writer.writerow([format_value(row[k]) for k in fields])
    return path


def write_jsonl(path: PathType, fields: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    with _open(path, 'JSON-lines file') as f:
        for row in rows:
            record = {k: row[k] for k in fields}
            # Same rounding as the CSV output
            record = {k: float(format_value(v)) if isinstance(v, float) else v for k, v in record.items()}
            f.write(json.dumps(record) + '\n')
    return path


def emit_metrics(metrics: RunMetrics, out_dir: PathType, prefix: str, metrics_format: str = 'csv') -> List[Path]:
    """
    Write the step log (step, loss, lr) and the eval log (epoch, top1, top5, wall_seconds) of one run.

    :param metrics: run metrics
    :param out_dir: output directory
    :param prefix: file name prefix, e.g. the run name
    :param metrics_format: 'csv', 'jsonl' or 'both'
    :return: written files
    """
    if metrics_format not in METRIC_FORMATS:
        raise ConfigError(f'metrics_format must be one of {METRIC_FORMATS}, got {metrics_format!r}')
    out_dir = Path(out_dir)
    steps = [dataclasses.asdict(s) for s in metrics.steps]
    evals = [dataclasses.asdict(e) for e in metrics.evals]
    written = []
    if metrics_format in ('csv', 'both'):
        written.append(write_csv(out_dir / f'{prefix}_steps.csv', STEP_FIELDS, steps))
        written.append(write_csv(out_dir / f'{prefix}_evals.csv', EVAL_FIELDS, evals))
    if metrics_format in ('jsonl', 'both'):
        written.append(write_jsonl(out_dir / f'{prefix}_steps.jsonl', STEP_FIELDS, steps))
        written.append(write_jsonl(out_dir / f'{prefix}_evals.jsonl', EVAL_FIELDS, evals))
    return written


def write_table(path: PathType, rows: Sequence[Dict[str, Any]]) -> Path:
    """Write result rows as CSV with the columns of the first row."""
    fields = list(rows[0]) if rows else []
    return write_csv(path, fields, rows)


def write_manifest(path: PathType, config: ExperimentConfig, preset: str, artifacts: Sequence[PathType]) -> Path:
    """
    Plain-text manifest: preset name, config hash, seed, the resolved configuration and produced artifacts.
    """
    path = Path(path)
    lines = [f'preset = {preset}', f'config_hash = {config.hash}', f'seed = {config.seed}', '']
    lines.append('[config]')
    lines.extend(config.to_text().splitlines())
    lines.append('')
    lines.append('[artifacts]')
    lines.extend(sorted(str(Path(a).name) for a in artifacts))
    with _open(path, 'manifest') as f:
        f.write('\n'.join(lines) + '\n')
    return path


def median(values: Sequence[float]) -> float:
    return float(np.median(values))
