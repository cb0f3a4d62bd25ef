"""Building Stage-2 (and ablation) parameter stores from earlier checkpoints."""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional

from .autodiff import Tensor
from .checkpoint import Checkpoint
from .errors import ConfigError, MissingSourceError, SurgeryError
from .model import FEModelConfig, ParamStore, init_adapter, init_head, init_params, init_spatial, init_temporal
from .model import interpolate_temporal_posemb

logger = logging.getLogger(__name__)

HEAD_POLICIES = ('copy', 'reinit')
VARIANTS = ('baseline', 'I', 'II', 'III', 'V', 'full_init')

# Fields that must agree for spatial weights to be reusable
SPATIAL_FIELDS = ('image_size', 'patch_size', 'channels', 'spatial_depth', 'hidden', 'heads', 'mlp_dim')
# Fields that must agree for spatial and temporal weights to be reusable
ENCODER_FIELDS = SPATIAL_FIELDS + ('temporal_depth', )


def _differing_fields(source: FEModelConfig, target: FEModelConfig, fields: Iterable[str]) -> List[str]:
    return [f'{f} ({getattr(source, f)} != {getattr(target, f)})' for f in fields if getattr(source, f) != getattr(target, f)]


def _copy_group(store: ParamStore, checkpoint: Checkpoint, group: str) -> None:
    records = checkpoint.group_records(group)
    if not records:
        raise SurgeryError(f"Source checkpoint has no '{group}' records")
    for name, values in records.items():
        store.add(group, name, Tensor(values.copy()))


def _check_head_policy(head_policy: str) -> None:
    if head_policy not in HEAD_POLICIES:
        raise ConfigError(f'Unknown head policy {head_policy!r}, expected one of {HEAD_POLICIES}')


def _transfer_encoders(stage1: Checkpoint, target: FEModelConfig, head_policy: str, seed: int) -> ParamStore:
    _check_head_policy(head_policy)
    source = stage1.config
    fields = list(ENCODER_FIELDS)
    if head_policy == 'copy':
        fields.append('num_classes')
    differing = _differing_fields(source, target, fields)
    if differing:
        raise SurgeryError(f'Stage-1 checkpoint does not match the target: {", ".join(differing)}')

    store = ParamStore()
    _copy_group(store, stage1, 'spatial')
    _copy_group(store, stage1, 'temporal')
    store.replace('temporal/posemb', interpolate_temporal_posemb(store['temporal/posemb'], target.num_frames).data)
    if head_policy == 'copy':
        _copy_group(store, stage1, 'head')
    else:
        init_head(store, target, seed)
    logger.info(f'Transferred encoders from {source.num_frames} to {target.num_frames} frames (head: {head_policy})')
    return store


def surgery_stage2_init(stage1: Checkpoint, target: FEModelConfig, head_policy: str = 'copy',
                        seed: int = 0) -> ParamStore:
    """
    Build the Stage-2 store: spatial copied and frozen, temporal copied with its positional embedding
    interpolated to target.num_frames, a fresh identity adapter, and the head copied or re-initialized.

    :param stage1: Stage-1 checkpoint (baseline mode)
    :param target: Stage-2 architecture; may differ from Stage 1 in num_frames (and num_classes with reinit)
    :param head_policy: 'copy' or 'reinit'
    :param seed: seed for the fresh adapter (and head)
    :return: parameter store with freeze flags {spatial: True, others: False}
    """
    store = _transfer_encoders(stage1, target, head_policy, seed)
    init_adapter(store, target, seed)
    store.apply_freeze_flags({'spatial': True, 'temporal': False, 'adapter': False, 'head': False})
    return store


def surgery_full_init(stage1: Checkpoint, target: FEModelConfig, head_policy: str = 'copy',
                      seed: int = 0) -> ParamStore:
    """
    Initialize a standard (unfrozen, adapter-free) model from a Stage-1 checkpoint.

    :param stage1: Stage-1 checkpoint
    :param target: architecture of the model to initialize
    :param head_policy: 'copy' or 'reinit'
    :param seed: seed for a re-initialized head
    :return: parameter store with nothing frozen
    """
    return _transfer_encoders(stage1, target, head_policy, seed)


@dataclass
class InitSources:
    """
    Initialization sources for ablation variants.

    :param spatial: checkpoint providing image-style spatial weights (e.g. the image-only source)
    :param stage1: Stage-1 checkpoint (required by V and full_init)
    :param random_spatial: use a seeded random spatial stand-in when no spatial checkpoint is given
    """
    spatial: Optional[Checkpoint] = None
    stage1: Optional[Checkpoint] = None
    random_spatial: bool = False


def variant_mode(variant: str) -> str:
    """Forward mode of an ablation variant: 'sfa' when it carries an adapter."""
    if variant not in VARIANTS:
        raise ConfigError(f'Unknown ablation variant {variant!r}, expected one of {VARIANTS}')
    return 'sfa' if variant in ('III', 'V') else 'baseline'


def _spatial_init(store: ParamStore, sources: InitSources, config: FEModelConfig, seed: int, variant: str) -> None:
    if sources.spatial is not None:
        differing = _differing_fields(sources.spatial.config, config, SPATIAL_FIELDS)
        if differing:
            raise SurgeryError(f'Spatial source does not match the target: {", ".join(differing)}')
        _copy_group(store, sources.spatial, 'spatial')
    elif sources.random_spatial:
        init_spatial(store, config, seed)
    else:
        raise MissingSourceError(f"Variant '{variant}' needs a spatial initialization source")


def spatial_transfer_init(spatial: Checkpoint, config: FEModelConfig, mode: str = 'baseline',
                          seed: int = 0) -> ParamStore:
    """
    Spatial weights copied from <spatial>, every other group freshly initialized for <mode>; nothing frozen.

    :param spatial: checkpoint providing the spatial group (e.g. the image-only source)
    :param config: target architecture
    :param mode: forward mode the store is built for
    :param seed: seed for freshly created records
    :return: parameter store
    """
    store = ParamStore()
    _spatial_init(store, InitSources(spatial=spatial), config, seed, 'spatial transfer')
    if mode != 'mean_pool':
        init_temporal(store, config, seed)
    if mode == 'sfa':
        init_adapter(store, config, seed)
    init_head(store, config, seed)
    return store


def ablation_init(variant: str, sources: InitSources, config: FEModelConfig, seed: int = 0,
                  head_policy: str = 'copy') -> ParamStore:
    """
    Parameters for one row of the ablation table.

    baseline   spatial from the image source, everything trainable, no adapter
    I          spatial from the image source and frozen, temporal random, no adapter
    II         spatial from the image source and trainable, temporal random and frozen
    III        spatial from the image source and frozen, temporal random, identity adapter
    V          surgery_stage2_init from the Stage-1 checkpoint
    full_init  surgery_full_init from the Stage-1 checkpoint (nothing frozen)

    :param variant: variant name
    :param sources: available initialization sources
    :param config: target architecture
    :param seed: seed for freshly created records
    :param head_policy: head handling for V / full_init
    :return: parameter store with the variant's freeze flags
    """
    mode = variant_mode(variant)
    if variant in ('V', 'full_init'):
        if sources.stage1 is None:
            raise MissingSourceError(f"Variant '{variant}' needs a Stage-1 checkpoint")
        if variant == 'V':
            return surgery_stage2_init(sources.stage1, config, head_policy, seed)
        return surgery_full_init(sources.stage1, config, head_policy, seed)

    store = ParamStore()
    _spatial_init(store, sources, config, seed, variant)
    init_temporal(store, config, seed)
    if mode == 'sfa':
        init_adapter(store, config, seed)
    init_head(store, config, seed)
    store.apply_freeze_flags({
        'spatial': variant in ('I', 'III'),
        'temporal': variant == 'II',
    })
    return store


def scratch_init(config: FEModelConfig, mode: str = 'baseline', seed: int = 0) -> ParamStore:
    """Everything random and trainable."""
    return init_params(config, mode, seed)
