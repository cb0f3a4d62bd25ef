"""
Analytical compute and memory accounting for one training step.

FLOPs are counted in multiply-accumulates with the usual per-layer formulas: a block on n tokens of
width d costs 4·n·d² (projections) + 2·n²·d (scores and weighted sum) + 2·n·d·m (MLP). The spatial
stage is counted per frame, the temporal stage per clip. Only stages that are recorded on the tape
store activations and cost backward FLOPs; a frozen spatial stage only needs a transient working
set of one block.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .model import FEModelConfig, count_params

logger = logging.getLogger(__name__)

FRAME_GRID = (4, 8, 16, 32, 48, 64, 96, 128)
GIB = 1 << 30


def block_flops(tokens: int, hidden: int, mlp_dim: int) -> int:
    n, d, m = tokens, hidden, mlp_dim
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


def block_activations(tokens: int, hidden: int, mlp_dim: int, heads: int) -> int:
    """
    Values kept for backward by one block: layer norm inputs and outputs, queries, keys, values,
    attention context and projection output, residual sums (10 · n · d), the MLP hidden layer
    before and after GELU (2 · n · m), and attention scores and probabilities (2 · h · n²).
    """
    n, d, m = tokens, hidden, mlp_dim
    return 10 * n * d + 2 * n * m + 2 * heads * n * n


@dataclass
class CostEstimate:
    """Per-step cost of training one model configuration. Byte counts include every group."""
    fwd_flops: int
    bwd_flops: int
    activation_bytes: int
    param_bytes: int
    optimizer_bytes: int
    grad_bytes: int = 0
    workspace_bytes: int = 0
    by_group: Dict[str, Dict[str, int]] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.activation_bytes + self.workspace_bytes

    def as_dict(self) -> Dict[str, int]:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != 'by_group'}
        d['total_bytes'] = self.total_bytes
        return d


def recorded_groups(mode: str) -> List[str]:
    """Groups whose operations are recorded on the tape during training in <mode>."""
    if mode == 'sfa':
        return ['adapter', 'temporal', 'head']
    if mode == 'mean_pool':
        return ['spatial', 'head']
    return ['spatial', 'temporal', 'head']


def estimate_cost(
    config: FEModelConfig,
    mode: str = 'baseline',
    frames: Optional[int] = None,
    local_batch: int = 1,
    bytes_per_value: int = 4,
) -> CostEstimate:
    """
    Estimate FLOPs and memory of one training step (forward, backward, momentum SGD update).

    :param config: architecture (e.g. from preset_config)
    :param mode: 'baseline' (everything trainable) or 'sfa' (spatial frozen, adapter added)
    :param frames: frames per clip, defaults to config.num_frames
    :param local_batch: clips per step on one device
    :param bytes_per_value: 4 for 32-bit floats
    :return: cost estimate
    """
    frames = config.num_frames if frames is None else frames
    config = config.replace(num_frames=frames)
    d, m, h = config.hidden, config.mlp_dim, config.heads
    b = local_batch

    n_spatial = config.num_tokens
    n_temporal = frames + 1
    per_frame_spatial_flops = config.num_patches * config.patch_dim * d + config.spatial_depth * block_flops(
        n_spatial, d, m)
    per_frame_block_acts = block_activations(n_spatial, d, m, h)

    fwd = {
        'spatial': b * frames * per_frame_spatial_flops,
        'temporal': b * config.temporal_depth * block_flops(n_temporal, d, m),
        'head': b * d * config.num_classes,
    }
    acts = {
        'spatial': b * frames * (config.spatial_depth * per_frame_block_acts + 2 * n_spatial * d),
        'temporal': b * (config.temporal_depth * block_activations(n_temporal, d, m, h) + 2 * n_temporal * d),
        'head': b * (d + config.num_classes),
    }
    if mode == 'sfa':
        a = config.adapter_hidden
        assert a is not None
        fwd['adapter'] = b * frames * 2 * d * a
        acts['adapter'] = b * frames * (d + 2 * a)
    if mode == 'mean_pool':
        del fwd['temporal'], acts['temporal']

    recorded = recorded_groups(mode)
    bwd = {g: 2 * f if g in recorded else 0 for g, f in fwd.items()}
    acts = {g: v if g in recorded else 0 for g, v in acts.items()}
    # A stage outside the tape still needs the working set of one block for all frames at once
    workspace = 0 if 'spatial' in recorded else b * frames * per_frame_block_acts

    params = count_params(config, mode)
    trainable = sum(n for g, n in params.items() if g in recorded)

    by_group = {
        g: {
            'fwd_flops': fwd[g],
            'bwd_flops': bwd[g],
            'activation_bytes': acts[g] * bytes_per_value,
            'param_bytes': params[g] * bytes_per_value
        }
        for g in fwd
    }
    return CostEstimate(
        fwd_flops=sum(fwd.values()),
        bwd_flops=sum(bwd.values()),
        activation_bytes=sum(acts.values()) * bytes_per_value,
        param_bytes=sum(params.values()) * bytes_per_value,
        optimizer_bytes=trainable * bytes_per_value,
        grad_bytes=trainable * bytes_per_value,
        workspace_bytes=workspace * bytes_per_value,
        by_group=by_group,
    )


def max_feasible_frames(
    config: FEModelConfig,
    mode: str,
    budget_bytes: int = 16 * GIB,
    local_batch: int = 1,
    bytes_per_value: int = 4,
    grid: Sequence[int] = FRAME_GRID,
) -> int:
    """
    Largest frame count of <grid> whose estimated training memory fits <budget_bytes>.

    :return: frame count, or 0 if not even the smallest grid entry fits
    """
    best = 0
    for frames in sorted(grid):
        estimate = estimate_cost(config, mode, frames, local_batch, bytes_per_value)
        if estimate.total_bytes <= budget_bytes:
            best = frames
    return best


def feasibility_grid(
    configs: Dict[str, FEModelConfig],
    modes: Sequence[str] = ('baseline', 'sfa'),
    budget_bytes: int = 16 * GIB,
    local_batch: int = 1,
    bytes_per_value: int = 4,
    grid: Sequence[int] = FRAME_GRID,
) -> List[Dict[str, object]]:
    """
    One row per (preset, mode, frames) with the estimated memory and whether it fits the budget.
    """
    rows: List[Dict[str, object]] = []
    for name, config in configs.items():
        for mode in modes:
            for frames in grid:
                estimate = estimate_cost(config, mode, frames, local_batch, bytes_per_value)
                rows.append(
                    dict(preset=name,
                         mode=mode,
                         frames=frames,
                         total_gib=estimate.total_bytes / GIB,
                         fwd_gflops=estimate.fwd_flops / 1e9,
                         bwd_gflops=estimate.bwd_flops / 1e9,
                         feasible=estimate.total_bytes <= budget_bytes))
            logger.info(f'{name}/{mode}: max feasible frames '
                        f'{max_feasible_frames(config, mode, budget_bytes, local_batch, bytes_per_value, grid)}')
    return rows
