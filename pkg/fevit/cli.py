"""Command line entry point: `fevit --preset <name> [--config file] [overrides]`."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .autodiff import precision
from .checkpoint import write_file
from .errors import ConfigError, FevitError, FrameCountError, PipelineError
from .experiments.presets import PRESETS, PresetResult, run_preset
from .experiments.utils import ExperimentConfig, emit_metrics, write_manifest, write_table
from .utils import ensure_dir, setup_logger

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

# Errors caused by the invocation rather than by the run itself
CONFIG_ERRORS = (ConfigError, FrameCountError, PipelineError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fevit', description='Two-stage factorised-encoder video transformer training')
    parser.add_argument('--preset', default='single_run', choices=sorted(PRESETS), help='experiment to run')
    parser.add_argument('--config', default=None, help='"key = value" configuration file')
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--frames', type=int, default=None, help='frames per clip (single_run)')
    parser.add_argument('--epochs', type=int, default=None, help='epochs (single_run)')
    parser.add_argument('--stage', type=int, default=None, choices=(1, 2))
    parser.add_argument('--init', default=None, help='checkpoint to initialize from')
    parser.add_argument('--out', default=None, help='output directory (default: runs/<preset>)')
    parser.add_argument('--precision', default=None, choices=('f32', 'f64'))
    parser.add_argument('--head', default=None, choices=('copy', 'reinit'), help='Stage-2 head policy')
    parser.add_argument('--metrics-format', default=None, choices=('csv', 'jsonl', 'both'))
    parser.add_argument('--log-level', default='INFO')
    parser.add_argument('--log-file', default=None)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then flags."""
    overrides = dict(seed=args.seed,
                     frames=args.frames,
                     epochs=args.epochs,
                     stage=args.stage,
                     init=args.init,
                     precision=args.precision,
                     head=args.head,
                     metrics_format=args.metrics_format)
    if args.config is not None:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def write_outputs(result: PresetResult, config: ExperimentConfig, out_dir: Path) -> List[Path]:
    artifacts: List[Path] = []
    for name, checkpoint in result.checkpoints.items():
        path = out_dir / f'{name}.sfav1'
        write_file(path, checkpoint)
        artifacts.append(path)
    for name, metrics in result.runs.items():
        artifacts.extend(emit_metrics(metrics, out_dir, name, config.metrics_format))
    for name, rows in result.tables.items():
        artifacts.append(write_table(out_dir / f'{result.name}_{name}.csv', rows))
    artifacts.append(write_manifest(out_dir / 'manifest.txt', config, result.name, artifacts))
    return artifacts


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    try:
        setup_logger(args.log_level.upper(), args.log_file)
    except (ValueError, OSError) as e:
        print(f'fevit: cannot set up logging: {e}', file=sys.stderr)
        return EXIT_CONFIG

    try:
        config = load_config(args)
        out_dir = ensure_dir(args.out if args.out is not None else Path('runs') / args.preset)
        with precision(config.precision):
            result = run_preset(args.preset, config)
        artifacts = write_outputs(result, config, out_dir)
    except CONFIG_ERRORS as e:
        logger.error(f'Configuration error: {e}')
        return EXIT_CONFIG
    except FevitError as e:
        logger.error(f'Run failed: {e}')
        return EXIT_RUNTIME

    logger.info(f"Wrote {len(artifacts)} artifacts to '{out_dir}'")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
