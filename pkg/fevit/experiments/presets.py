"""Desk-scale experiments: single runs, the ablation table, frame sweep, headstart, curriculum and cost grid."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from ..checkpoint import Checkpoint
from ..cost import GIB, feasibility_grid, max_feasible_frames
from ..dataset import steps_per_epoch
from ..errors import ConfigError
from ..model import FactorisedEncoder, preset_config
from ..surgery import InitSources, ablation_init, surgery_stage2_init, variant_mode
from ..train import RunMetrics, RunSpec, StageResult, best_epoch, near_peak_epoch, run_pipeline, run_stage
from .utils import ExperimentConfig, median

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ('baseline', 'I', 'II', 'III', 'V')


@dataclass
class PresetResult:
    """Result tables, per-run metrics and checkpoints produced by a preset."""
    name: str
    tables: Dict[str, List[Dict[str, object]]] = field(default_factory=dict)
    runs: Dict[str, RunMetrics] = field(default_factory=dict)
    checkpoints: Dict[str, Checkpoint] = field(default_factory=dict)


def train_image_source(config: ExperimentConfig, seed: Optional[int] = None) -> StageResult:
    """
    Train a single-frame model on the sprite location task. Its spatial encoder never sees temporal
    order and serves as the image-style spatial initialization.
    """
    seed = config.seed if seed is None else seed
    spec = RunSpec(name='image',
                   model=config.model_config(1, num_classes=config.dataset_spec('image').num_classes),
                   data=config.dataset_spec('image'),
                   train=config.train_config(config.image_epochs, seed),
                   stage='image')
    return run_pipeline([spec]).final


def stage1_spec(config: ExperimentConfig, image: Checkpoint, frames: int, epochs: int, seed: int,
                name: Optional[str] = None) -> RunSpec:
    """Stage 1: full training at <frames> frames, spatial encoder initialized from the image source."""
    return RunSpec(name=name or f'stage1_{frames}f',
                   model=config.model_config(frames),
                   data=config.dataset_spec(),
                   train=config.train_config(epochs, seed),
                   stage='stage1',
                   init=image,
                   surgery='spatial')


def stage2_spec(config: ExperimentConfig, init: object, frames: int, epochs: int, seed: int,
                name: Optional[str] = None, eval_every: Optional[int] = None) -> RunSpec:
    """Stage 2: frozen spatial encoder, identity adapter, temporal encoder initialized from <init>."""
    return RunSpec(name=name or f'stage2_{frames}f',
                   model=config.model_config(frames),
                   data=config.dataset_spec(),
                   train=config.train_config(epochs, seed, eval_every),
                   mode='sfa',
                   stage='stage2',
                   init=init,  # type: ignore[arg-type]
                   surgery='stage2',
                   head_policy=config.head)


def preset_single_run(config: ExperimentConfig) -> PresetResult:
    """
    One Stage-1 run (fresh parameters, or continued from --init) or one Stage-2 run (surgery on --init).
    """
    if config.init is not None and not Path(config.init).is_file():
        raise ConfigError(f"Checkpoint '{config.init}' does not exist")
    if config.stage == 1:
        spec = RunSpec(name=f'stage1_{config.frames}f',
                       model=config.model_config(config.frames),
                       data=config.dataset_spec(),
                       train=config.train_config(config.epochs),
                       stage='stage1',
                       init=config.init)
    else:
        if config.init is None:
            raise ConfigError('Stage 2 needs a Stage-1 checkpoint (--init)')
        spec = stage2_spec(config, config.init, config.frames, config.epochs, config.seed)
    result = run_pipeline([spec]).final
    return PresetResult(name='single_run',
                        runs={result.name: result.metrics},
                        checkpoints={result.name: result.checkpoint})


def preset_ablation_table1(config: ExperimentConfig) -> PresetResult:
    """
    Train variants baseline, I, II, III and V at stage2_frames with identical budgets, once per seed of
    ablation_seeds, and report median top1/top5 and the step-time ratio relative to the baseline.
    """
    output = PresetResult(name='ablation_table1')
    per_variant: Dict[str, Dict[str, List[float]]] = {v: dict(top1=[], top5=[], ratio=[]) for v in ABLATION_VARIANTS}
    target = config.model_config(config.stage2_frames)
    data = config.dataset_spec()

    for seed in config.ablation_seeds:
        image = train_image_source(config, seed)
        stage1 = run_pipeline([stage1_spec(config, image.checkpoint, config.stage1_frames, config.stage1_epochs,
                                           seed)]).final
        output.checkpoints[f'stage1_seed{seed}'] = stage1.checkpoint
        sources = InitSources(spatial=image.checkpoint, stage1=stage1.checkpoint)

        step_times: Dict[str, float] = {}
        for variant in ABLATION_VARIANTS:
            store = ablation_init(variant, sources, target, seed, config.head)
            model = FactorisedEncoder(target, variant_mode(variant))
            metrics = run_stage(model, store, data, config.train_config(config.stage2_epochs, seed))
            output.runs[f'{variant}_seed{seed}'] = metrics
            step_times[variant] = metrics.mean_step_time
            per_variant[variant]['top1'].append(metrics.final_top1)
            per_variant[variant]['top5'].append(metrics.final_top5)
        for variant in ABLATION_VARIANTS:
            per_variant[variant]['ratio'].append(step_times[variant] / step_times['baseline'])

    rows: List[Dict[str, object]] = [
        dict(variant=v,
             top1=median(per_variant[v]['top1']),
             top5=median(per_variant[v]['top5']),
             step_time_ratio=median(per_variant[v]['ratio'])) for v in ABLATION_VARIANTS
    ]
    output.tables['table'] = rows

    top1 = {row['variant']: float(row['top1']) for row in rows}  # type: ignore[arg-type]
    if not (top1['baseline'] - top1['V'] <= 5 and top1['V'] - top1['III'] >= 10
            and top1['III'] - max(top1['I'], top1['II']) >= 5):
        logger.warning(f'Ablation ordering does not hold: {top1}')
    return output


def preset_frame_sweep(config: ExperimentConfig) -> PresetResult:
    """
    Stage-2 runs at stage2_frames initialized from Stage-1 models trained at each frame count of
    sweep_sources, plus the image-only source (frozen image spatial encoder, fresh temporal encoder).
    """
    output = PresetResult(name='frame_sweep_fig3')
    seed = config.seed
    target = config.model_config(config.stage2_frames)
    image = train_image_source(config, seed)

    rows: List[Dict[str, object]] = []
    store = ablation_init('III', InitSources(spatial=image.checkpoint), target, seed)
    metrics = run_stage(FactorisedEncoder(target, 'sfa'), store, config.dataset_spec(),
                        config.train_config(config.stage2_epochs, seed))
    output.runs['from_image'] = metrics
    rows.append(dict(source='image', target_frames=config.stage2_frames, top1=metrics.final_top1,
                     top5=metrics.final_top5))

    for frames in config.sweep_sources:
        pipeline = run_pipeline([
            stage1_spec(config, image.checkpoint, frames, config.stage1_epochs, seed),
            stage2_spec(config, f'stage1_{frames}f', config.stage2_frames, config.stage2_epochs, seed,
                        name=f'from_{frames}f'),
        ])
        result = pipeline.final
        output.runs[result.name] = result.metrics
        output.checkpoints[f'stage1_{frames}f'] = pipeline[f'stage1_{frames}f'].checkpoint
        rows.append(dict(source=f'{frames}f', target_frames=config.stage2_frames, top1=result.metrics.final_top1,
                         top5=result.metrics.final_top5))
    output.tables['table'] = rows

    image_top1 = rows[0]['top1']
    if any(row['top1'] <= image_top1 for row in rows[1:]):  # type: ignore[operator]
        logger.warning('The image-only source is not the strictly worst initialization')
    return output


def preset_headstart(config: ExperimentConfig) -> PresetResult:
    """
    Evaluate every epoch while training a surgery-initialized Stage-2 model and an identically shaped
    model without Stage-1 initialization (image spatial encoder frozen, fresh temporal encoder).
    With headstart_unfrozen the standard-model pair (full_init vs. baseline) is trained as well.
    """
    output = PresetResult(name='headstart_fig4')
    seed = config.seed
    target = config.model_config(config.stage2_frames)
    data = config.dataset_spec()
    train = config.train_config(config.headstart_epochs, seed, eval_every=steps_per_epoch(data, config.local_batch))

    image = train_image_source(config, seed)
    stage1 = run_pipeline([stage1_spec(config, image.checkpoint, config.stage1_frames, config.stage1_epochs,
                                       seed)]).final
    output.checkpoints['stage1'] = stage1.checkpoint
    sources = InitSources(spatial=image.checkpoint, stage1=stage1.checkpoint)

    pairs = [('initialized', 'V'), ('scratch', 'III')]
    if config.headstart_unfrozen:
        pairs += [('initialized_unfrozen', 'full_init'), ('scratch_unfrozen', 'baseline')]
    for name, variant in pairs:
        store = ablation_init(variant, sources, target, seed, config.head)
        output.runs[name] = run_stage(FactorisedEncoder(target, variant_mode(variant)), store, data, train)

    output.tables['curves'] = [
        dict(run=name, epoch=e.epoch, top1=e.top1, top5=e.top5) for name, metrics in output.runs.items()
        for e in metrics.evals
    ]
    output.tables['summary'] = [
        dict(run=name,
             near_peak_epoch=near_peak_epoch(metrics),
             best_epoch=best_epoch(metrics),
             first_top1=metrics.evals[0].top1,
             final_top1=metrics.final_top1) for name, metrics in output.runs.items()
    ]
    initialized, scratch = output.runs['initialized'], output.runs['scratch']
    if near_peak_epoch(initialized) >= near_peak_epoch(scratch):
        logger.warning('The initialized run does not reach near-peak performance before the scratch run')
    return output


def _curriculum_models(config: ExperimentConfig, image: Checkpoint, seed: int) -> Dict[str, List[RunSpec]]:
    short, middle, long = config.curriculum_frames
    unit = config.curriculum_unit_epochs

    def a(epochs: int) -> RunSpec:
        return stage1_spec(config, image, short, epochs, seed, name='a')

    def baseline_long(epochs: int) -> RunSpec:
        return stage1_spec(config, image, long, epochs, seed, name='d')

    return {
        'A': [a(unit), stage2_spec(config, 'a', middle, unit, seed, name='b'),
              stage2_spec(config, 'b', long, unit, seed, name='c')],
        'B': [a(unit), stage2_spec(config, 'a', long, 2 * unit, seed, name='c')],
        'C': [a(unit), stage2_spec(config, 'a', long, 3 * unit, seed, name='c')],
        'D': [a(3 * unit), stage2_spec(config, 'a', long, 3 * unit, seed, name='c')],
        'E': [baseline_long(3 * unit)],
    }


def preset_curriculum(config: ExperimentConfig) -> PresetResult:
    """
    Models A to E: chained runs over the frame ladder curriculum_frames with epoch budgets in multiples
    of curriculum_unit_epochs. Sub-models are a (short, full), b (middle, frozen + adapter),
    c (long, frozen + adapter) and d (long, full).
    """
    output = PresetResult(name='curriculum_ae')
    seed = config.seed
    image = train_image_source(config, seed)

    rows: List[Dict[str, object]] = []
    for model_name, specs in _curriculum_models(config, image.checkpoint, seed).items():
        pipeline = run_pipeline(specs)
        for result in pipeline.results:
            output.runs[f'{model_name}_{result.name}'] = result.metrics
        output.checkpoints[model_name] = pipeline.final.checkpoint
        rows.append(
            dict(model=model_name,
                 sub_models='+'.join(r.name for r in pipeline.results),
                 top1=pipeline.final.metrics.final_top1,
                 top5=pipeline.final.metrics.final_top5,
                 stage_seconds=';'.join(f'{r.name}:{r.stage_seconds:.6g}' for r in pipeline.results),
                 total_seconds=pipeline.final.cumulative_seconds))
    output.tables['table'] = rows
    return output


def preset_cost_table6(config: ExperimentConfig) -> PresetResult:
    """
    Memory feasibility of baseline and sfa training for the full-scale presets (no training).
    """
    configs = {name: preset_config(name) for name in config.cost_presets}
    budget = int(config.cost_budget_gib * GIB)
    output = PresetResult(name='cost_table6')
    output.tables['grid'] = feasibility_grid(configs, budget_bytes=budget, local_batch=config.cost_local_batch)
    output.tables['max_frames'] = [
        dict(preset=name,
             baseline=max_feasible_frames(c, 'baseline', budget, config.cost_local_batch),
             sfa=max_feasible_frames(c, 'sfa', budget, config.cost_local_batch)) for name, c in configs.items()
    ]
    return output


def preset_temporal_control(config: ExperimentConfig) -> PresetResult:
    """
    Train the order-invariant control (mean-pooled frame features) and the full model on the same data.
    The control should stay at chance while the full model learns the task.
    """
    output = PresetResult(name='temporal_control')
    seed = config.seed
    frames = config.stage1_frames
    model_config = config.model_config(frames)
    data = config.dataset_spec()
    specs = [
        RunSpec(name='order_invariant', model=model_config, data=data,
                train=config.train_config(config.control_epochs, seed), mode='mean_pool', stage='scratch'),
        RunSpec(name='full', model=model_config, data=data, train=config.train_config(config.control_epochs, seed),
                stage='scratch'),
    ]
    pipeline = run_pipeline(specs)
    chance = 100.0 / data.num_classes
    rows: List[Dict[str, object]] = []
    for result in pipeline.results:
        output.runs[result.name] = result.metrics
        rows.append(dict(model=result.name, top1=result.metrics.final_top1, top5=result.metrics.final_top5,
                         chance=chance))
    output.tables['table'] = rows
    return output


PRESETS: Dict[str, Callable[[ExperimentConfig], PresetResult]] = {
    'single_run': preset_single_run,
    'ablation_table1': preset_ablation_table1,
    'frame_sweep_fig3': preset_frame_sweep,
    'headstart_fig4': preset_headstart,
    'curriculum_ae': preset_curriculum,
    'cost_table6': preset_cost_table6,
    'temporal_control': preset_temporal_control,
}


def run_preset(name: str, config: ExperimentConfig) -> PresetResult:
    if name not in PRESETS:
        raise ConfigError(f'Unknown preset {name!r}, expected one of {sorted(PRESETS)}')
    logger.info(f"Running preset '{name}' (config {config.hash}, seed {config.seed})")
    return PRESETS[name](config)
