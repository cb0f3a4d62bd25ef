"""Factorised-encoder video transformer: per-frame spatial encoder, adapter, temporal encoder, head."""

import contextlib
import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .autodiff import Tensor, broadcast_to, concat, default_dtype, gelu, layer_norm, linear, matmul, no_grad, softmax
from .errors import ConfigError, InterpolationError, MissingGroupError, ShapeError, TemporalLengthError
from .utils import truncated_normal

logger = logging.getLogger(__name__)

GROUPS = ('spatial', 'temporal', 'adapter', 'head')
MODES = ('baseline', 'sfa', 'mean_pool')
INIT_STD = 0.02

VideoLike = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class FEModelConfig:
    """Architecture of a factorised-encoder model. Defaults are the desk-scale configuration."""
    image_size: int = 32
    patch_size: int = 8
    num_frames: int = 8
    spatial_depth: int = 4
    temporal_depth: int = 2
    hidden: int = 64
    heads: int = 4
    mlp_dim: int = 256
    adapter_hidden: Optional[int] = None  # defaults to hidden
    num_classes: int = 8
    channels: int = 3
    variant_name: str = 'desk'

    def __post_init__(self):
        if self.adapter_hidden is None:
            object.__setattr__(self, 'adapter_hidden', self.hidden)
        for name in ('image_size', 'patch_size', 'num_frames', 'spatial_depth', 'hidden', 'heads', 'mlp_dim',
                     'adapter_hidden', 'num_classes', 'channels'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if self.temporal_depth < 0:
            raise ConfigError(f'temporal_depth must be non-negative, got {self.temporal_depth}')
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f'image_size {self.image_size} is not divisible by patch_size {self.patch_size}')
        if self.hidden % self.heads != 0:
            raise ConfigError(f'hidden {self.hidden} is not divisible by heads {self.heads}')

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size)**2

    @property
    def num_tokens(self) -> int:
        """Spatial sequence length: patches plus class token."""
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def replace(self, **changes: Any) -> 'FEModelConfig':
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'FEModelConfig':
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f'Unknown model config fields: {sorted(unknown)}')
        return cls(**d)


# Full-scale variants (heads / layers / hidden / MLP), used by the cost estimator only
PRESETS: Dict[str, Dict[str, Any]] = {
    'B': dict(heads=12, spatial_depth=12, hidden=768, mlp_dim=3072),
    'L': dict(heads=16, spatial_depth=24, hidden=1024, mlp_dim=4096),
    'H': dict(heads=16, spatial_depth=32, hidden=1280, mlp_dim=5120),
    'g': dict(heads=16, spatial_depth=40, hidden=1408, mlp_dim=6144),
}


def preset_config(name: str, **overrides: Any) -> FEModelConfig:
    """
    Full-scale configuration for preset <name> (B, L, H or g) at 224px, patch 16, 4 temporal layers.

    :param name: preset name
    :param overrides: fields to change, e.g. num_frames
    :return: model configuration
    """
    if name not in PRESETS:
        raise ConfigError(f'Unknown preset {name!r}, expected one of {sorted(PRESETS)}')
    values: Dict[str, Any] = dict(image_size=224, patch_size=16, num_frames=32, temporal_depth=4, num_classes=400,
                                  variant_name=name)
    values.update(PRESETS[name])
    values.update(overrides)
    return FEModelConfig(**values)


class ParamStore:
    """
    Named model parameters partitioned into groups (spatial, temporal, adapter, head), each with a freeze flag.

    Record names carry their group as prefix, e.g. 'temporal/posemb'. Tensors of a frozen group have
    requires_grad == False and therefore never enter a recorded graph.
    """
    def __init__(self) -> None:
        self.groups: Dict[str, Dict[str, Tensor]] = {}
        self.freeze_flags: Dict[str, bool] = {}

    def __repr__(self):
        sizes = ', '.join(f'{g}={self.num_elements(g)}' for g in self.groups)
        return f'ParamStore({sizes}, frozen={self.frozen_groups()})'

    def add(self, group: str, name: str, tensor: Tensor) -> None:
        if group not in GROUPS:
            raise ConfigError(f'Unknown parameter group {group!r}')
        if not name.startswith(group + '/'):
            raise ConfigError(f'Record {name!r} does not belong to group {group!r}')
        if name in self:
            raise ConfigError(f'Duplicate record {name!r}')
        frozen = self.freeze_flags.setdefault(group, False)
        tensor.name = name
        tensor.requires_grad = not frozen
        self.groups.setdefault(group, {})[name] = tensor

    def __contains__(self, name: str) -> bool:
        return any(name in records for records in self.groups.values())

    def __getitem__(self, name: str) -> Tensor:
        for records in self.groups.values():
            if name in records:
                return records[name]
        raise KeyError(name)

    def __len__(self) -> int:
        return sum(len(records) for records in self.groups.values())

    def has_group(self, group: str) -> bool:
        return group in self.groups

    def group_of(self, name: str) -> str:
        for group, records in self.groups.items():
            if name in records:
                return group
        raise KeyError(name)

    def group_map(self) -> Dict[str, str]:
        return {name: group for group, records in self.groups.items() for name in records}

    def names(self) -> List[str]:
        return sorted(self.group_map())

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.names():
            yield name, self[name]

    def tensors(self, group: str) -> Dict[str, Tensor]:
        return self.groups.get(group, {})

    def replace(self, name: str, data: np.ndarray) -> None:
        """Swap the values of record <name> for a fresh array (never mutates the old one)."""
        old = self[name]
        tensor = Tensor(data, requires_grad=old.requires_grad, name=name)
        self.groups[self.group_of(name)][name] = tensor

    def set_frozen(self, group: str, frozen: bool = True) -> None:
        self.freeze_flags[group] = frozen
        for tensor in self.groups.get(group, {}).values():
            tensor.requires_grad = not frozen
            tensor.grad = None

    def apply_freeze_flags(self, flags: Dict[str, bool]) -> None:
        for group, frozen in flags.items():
            self.set_frozen(group, frozen)

    def frozen_groups(self) -> List[str]:
        return [g for g in self.groups if self.freeze_flags.get(g, False)]

    def trainable_groups(self) -> List[str]:
        return [g for g in self.groups if not self.freeze_flags.get(g, False)]

    def num_elements(self, group: Optional[str] = None) -> int:
        groups = [group] if group is not None else list(self.groups)
        return sum(t.size for g in groups for t in self.groups.get(g, {}).values())

    def snapshot(self, group: Optional[str] = None) -> Dict[str, np.ndarray]:
        """Copies of the raw values (of one group or of all records)."""
        groups = [group] if group is not None else list(self.groups)
        return {name: t.data.copy() for g in groups for name, t in self.groups.get(g, {}).items()}

    def zero_grad(self) -> None:
        for records in self.groups.values():
            for tensor in records.values():
                tensor.grad = None

    def copy(self) -> 'ParamStore':
        other = ParamStore()
        other.freeze_flags = dict(self.freeze_flags)
        for group, records in self.groups.items():
            for name, tensor in records.items():
                other.add(group, name, Tensor(tensor.data.copy()))
        return other


# Initialization


def _normal(store: ParamStore, group: str, name: str, shape: Tuple[int, ...], seed: int) -> None:
    store.add(group, name, Tensor(truncated_normal(shape, seed=seed, name=name, std=INIT_STD)))


def _zeros(store: ParamStore, group: str, name: str, shape: Tuple[int, ...]) -> None:
    store.add(group, name, Tensor(np.zeros(shape)))


def _ones(store: ParamStore, group: str, name: str, shape: Tuple[int, ...]) -> None:
    store.add(group, name, Tensor(np.ones(shape)))


def _init_dense(store: ParamStore, group: str, prefix: str, fan_in: int, fan_out: int, seed: int) -> None:
    _normal(store, group, f'{prefix}/kernel', (fan_in, fan_out), seed)
    _zeros(store, group, f'{prefix}/bias', (fan_out, ))


def _init_norm(store: ParamStore, group: str, prefix: str, width: int) -> None:
    _ones(store, group, f'{prefix}/scale', (width, ))
    _zeros(store, group, f'{prefix}/bias', (width, ))


def _init_encoder(store: ParamStore, group: str, depth: int, config: FEModelConfig, seed: int) -> None:
    d, m = config.hidden, config.mlp_dim
    for i in range(depth):
        prefix = f'{group}/block{i}'
        _init_norm(store, group, f'{prefix}/ln1', d)
        for proj in ('query', 'key', 'value', 'out'):
            _init_dense(store, group, f'{prefix}/attn/{proj}', d, d, seed)
        _init_norm(store, group, f'{prefix}/ln2', d)
        _init_dense(store, group, f'{prefix}/mlp/fc1', d, m, seed)
        _init_dense(store, group, f'{prefix}/mlp/fc2', m, d, seed)
    _init_norm(store, group, f'{group}/encoder_norm', d)


def init_spatial(store: ParamStore, config: FEModelConfig, seed: int) -> None:
    d = config.hidden
    _init_dense(store, 'spatial', 'spatial/embedding', config.patch_dim, d, seed)
    _normal(store, 'spatial', 'spatial/cls', (d, ), seed)
    _normal(store, 'spatial', 'spatial/posemb', (config.num_tokens, d), seed)
    _init_encoder(store, 'spatial', config.spatial_depth, config, seed)


def init_temporal(store: ParamStore, config: FEModelConfig, seed: int) -> None:
    d = config.hidden
    _normal(store, 'temporal', 'temporal/cls', (d, ), seed)
    _normal(store, 'temporal', 'temporal/posemb', (config.num_frames, d), seed)
    _init_encoder(store, 'temporal', config.temporal_depth, config, seed)


def init_adapter(store: ParamStore, config: FEModelConfig, seed: int) -> None:
    """Identity-initialized adapter: random first layer, zero second layer."""
    d, a = config.hidden, config.adapter_hidden
    _init_dense(store, 'adapter', 'adapter/fc1', d, a, seed)
    _zeros(store, 'adapter', 'adapter/fc2/kernel', (a, d))
    _zeros(store, 'adapter', 'adapter/fc2/bias', (d, ))


def init_head(store: ParamStore, config: FEModelConfig, seed: int) -> None:
    _init_dense(store, 'head', 'head', config.hidden, config.num_classes, seed)


def init_params(config: FEModelConfig, mode: str = 'baseline', seed: int = 0) -> ParamStore:
    """
    Freshly initialized parameters for <mode>. Kernels, class tokens and positional embeddings are drawn
    from a truncated normal (std 0.02) seeded per record; biases are zero and norm scales one.

    :param config: architecture
    :param mode: 'baseline', 'sfa' (adds an identity adapter) or 'mean_pool' (no temporal group)
    :param seed: global seed
    :return: parameter store with nothing frozen
    """
    _check_mode(mode)
    store = ParamStore()
    init_spatial(store, config, seed)
    if mode != 'mean_pool':
        init_temporal(store, config, seed)
    if mode == 'sfa':
        init_adapter(store, config, seed)
    init_head(store, config, seed)
    return store


def block_param_count(hidden: int, mlp_dim: int) -> int:
    """Parameters of one pre-norm encoder block: attention, MLP and two layer norms."""
    d, m = hidden, mlp_dim
    return (4 * d * d + 4 * d) + (2 * d * m + d + m) + 4 * d


def count_params(config: FEModelConfig, mode: str = 'baseline') -> Dict[str, int]:
    """
    Closed-form parameter count per group.

    :param config: architecture
    :param mode: forward mode deciding which groups exist
    :return: mapping from group name to number of values
    """
    _check_mode(mode)
    d = config.hidden
    block = block_param_count(d, config.mlp_dim)
    counts = {
        'spatial': (config.patch_dim * d + d) + d + config.num_tokens * d + config.spatial_depth * block + 2 * d,
    }
    if mode != 'mean_pool':
        counts['temporal'] = d + config.num_frames * d + config.temporal_depth * block + 2 * d
    if mode == 'sfa':
        a = config.adapter_hidden
        assert a is not None
        counts['adapter'] = (d * a + a) + (a * d + d)
    counts['head'] = d * config.num_classes + config.num_classes
    return counts


# Forward pass


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f'Unknown mode {mode!r}, expected one of {MODES}')


def patchify(video: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Split every frame into non-overlapping patches.

    :param video: array [B, T, H, W, C]
    :param patch_size: patch edge length
    :return: array [B, T, N, patch_size * patch_size * C], patches in row-major order
    """
    b, t, h, w, c = video.shape
    p = patch_size
    patches = video.reshape(b, t, h // p, p, w // p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
    return patches.reshape(b, t, (h // p) * (w // p), p * p * c)


def patch_embed(video: VideoLike, params: ParamStore, config: FEModelConfig) -> Tensor:
    """
    Embed every frame independently: linear patch projection, class token, spatial positional embedding.

    :param video: clips [B, T, H, W, C]
    :return: tokens [B, T, N + 1, d]
    """
    data = video.data if isinstance(video, Tensor) else np.asarray(video)
    if data.ndim != 5:
        raise ShapeError(f'Expected video [B, T, H, W, C], got shape {data.shape}')
    b, t, h, w, c = data.shape
    if h != config.image_size or w != config.image_size or c != config.channels:
        raise ShapeError(f'Frame shape {(h, w, c)} does not match config '
                         f'{(config.image_size, config.image_size, config.channels)}')
    if t != config.num_frames:
        raise ShapeError(f'Video has {t} frames but the model expects {config.num_frames}')

    patches = Tensor(patchify(data.astype(default_dtype(), copy=False), config.patch_size))
    x = linear(patches, params['spatial/embedding/kernel'], params['spatial/embedding/bias'])
    d = config.hidden
    cls = broadcast_to(params['spatial/cls'].reshape(1, 1, 1, d), (b, t, 1, d))
    return concat([cls, x], axis=2) + params['spatial/posemb']


def attention(x: Tensor, params: ParamStore, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of x [S, n, d]."""
    s, n, d = x.shape
    head_dim = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(s, n, heads, head_dim).transpose(0, 2, 1, 3)

    q = split_heads(linear(x, params[f'{prefix}/query/kernel'], params[f'{prefix}/query/bias']))
    k = split_heads(linear(x, params[f'{prefix}/key/kernel'], params[f'{prefix}/key/bias']))
    v = split_heads(linear(x, params[f'{prefix}/value/kernel'], params[f'{prefix}/value/bias']))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    context = matmul(softmax(scores, axis=-1), v).transpose(0, 2, 1, 3).reshape(s, n, d)
    return linear(context, params[f'{prefix}/out/kernel'], params[f'{prefix}/out/bias'])


def encoder_block(x: Tensor, params: ParamStore, prefix: str, heads: int) -> Tensor:
    """Pre-norm transformer block on x [S, n, d]."""
    h = layer_norm(x, params[f'{prefix}/ln1/scale'], params[f'{prefix}/ln1/bias'])
    x = x + attention(h, params, f'{prefix}/attn', heads)
    h = layer_norm(x, params[f'{prefix}/ln2/scale'], params[f'{prefix}/ln2/bias'])
    h = gelu(linear(h, params[f'{prefix}/mlp/fc1/kernel'], params[f'{prefix}/mlp/fc1/bias']))
    return x + linear(h, params[f'{prefix}/mlp/fc2/kernel'], params[f'{prefix}/mlp/fc2/bias'])


def encode(x: Tensor, params: ParamStore, group: str, depth: int, heads: int) -> Tensor:
    for i in range(depth):
        x = encoder_block(x, params, f'{group}/block{i}', heads)
    return layer_norm(x, params[f'{group}/encoder_norm/scale'], params[f'{group}/encoder_norm/bias'])


def spatial_encode(tokens: Tensor, params: ParamStore, config: FEModelConfig) -> Tensor:
    """
    Run the spatial transformer on every frame separately and return the class token of each frame.

    :param tokens: [B, T, N + 1, d]
    :return: per-frame representations [B, T, d]
    """
    b, t, n, d = tokens.shape
    # Each frame is its own sequence: frames never attend to each other
    x = encode(tokens.reshape(b * t, n, d), params, 'spatial', config.spatial_depth, config.heads)
    return x[:, 0, :].reshape(b, t, d)


def adapter_apply(x: Tensor, params: ParamStore) -> Tensor:
    """
    Residual two-layer MLP applied to every frame representation: x + W2 gelu(W1 x + b1) + b2.

    :param x: [B, T, d]
    :return: [B, T, d]
    """
    h = gelu(linear(x, params['adapter/fc1/kernel'], params['adapter/fc1/bias']))
    return x + linear(h, params['adapter/fc2/kernel'], params['adapter/fc2/bias'])


def temporal_encode(x: Tensor, params: ParamStore, config: FEModelConfig) -> Tensor:
    """
    Add temporal positional embeddings, prepend the temporal class token and run the temporal transformer.

    :param x: per-frame representations [B, T, d]
    :return: clip representation [B, d]
    """
    b, t, d = x.shape
    posemb = params['temporal/posemb']
    if posemb.shape[0] != t:
        raise TemporalLengthError(f'Got {t} frames but the temporal positional embedding has {posemb.shape[0]} '
                                  'entries; interpolate it with interpolate_temporal_posemb')
    x = x + posemb
    cls = broadcast_to(params['temporal/cls'].reshape(1, 1, d), (b, 1, d))
    x = encode(concat([cls, x], axis=1), params, 'temporal', config.temporal_depth, config.heads)
    return x[:, 0, :]


def head_apply(x: Tensor, params: ParamStore) -> Tensor:
    b, d = x.shape
    # One product per clip keeps identical clips bitwise identical
    logits = linear(x.reshape(b, 1, d), params['head/kernel'], params['head/bias'])
    return logits.reshape(b, logits.shape[-1])


def forward(video: VideoLike, params: ParamStore, config: FEModelConfig, mode: str = 'baseline') -> Tensor:
    """
    Compute class logits.

    baseline:  head(temporal(spatial(embed(video))))
    sfa:       head(temporal(adapter(spatial(embed(video)))))
    mean_pool: head(mean over frames of spatial(embed(video))), an order-invariant control

    :param video: clips [B, T, H, W, C]
    :param params: parameters (must contain every group <mode> uses)
    :param config: architecture
    :param mode: forward mode
    :return: logits [B, num_classes]
    """
    _check_mode(mode)
    required = ['spatial', 'head'] + (['temporal'] if mode != 'mean_pool' else []) + (['adapter']
                                                                                      if mode == 'sfa' else [])
    for group in required:
        if not params.has_group(group):
            raise MissingGroupError(f"Mode '{mode}' requires parameter group '{group}'")

    # A frozen spatial encoder with a constant input records no graph
    frozen = 'spatial' in params.frozen_groups() and not (isinstance(video, Tensor) and video.requires_grad)
    with no_grad() if frozen else contextlib.nullcontext():
        x = spatial_encode(patch_embed(video, params, config), params, config)
    if mode == 'mean_pool':
        return head_apply(x.mean(axis=1), params)
    if mode == 'sfa':
        x = adapter_apply(x, params)
    return head_apply(temporal_encode(x, params, config), params)


class FactorisedEncoder:
    def __init__(self, config: FEModelConfig, mode: str = 'baseline') -> None:
        """
        Callable pairing an architecture with a forward mode.

        :param config: architecture
        :param mode: 'baseline', 'sfa' or 'mean_pool'
        """
        _check_mode(mode)
        self.config = config
        self.mode = mode

    def __repr__(self):
        return f"FactorisedEncoder(mode='{self.mode}', frames={self.config.num_frames}, variant='{self.config.variant_name}')"

    def __call__(self, video: VideoLike, params: ParamStore) -> Tensor:
        return forward(video, params, self.config, self.mode)

    def init_params(self, seed: int = 0) -> ParamStore:
        return init_params(self.config, self.mode, seed)

    def with_frames(self, num_frames: int) -> 'FactorisedEncoder':
        return FactorisedEncoder(self.config.replace(num_frames=num_frames), self.mode)


def interpolate_temporal_posemb(table: Union[Tensor, np.ndarray], num_frames: int) -> Tensor:
    """
    Resample a temporal positional embedding table to <num_frames> entries by piecewise-linear
    interpolation, treating row i as a sample at position i / (T_src - 1).

    :param table: [T_src, d]
    :param num_frames: T_dst
    :return: [T_dst, d] (an exact copy when T_dst == T_src)
    """
    values = table.data if isinstance(table, Tensor) else np.asarray(table)
    src = values.shape[0]
    if num_frames < 1:
        raise InterpolationError(f'Target length must be positive, got {num_frames}')
    if num_frames == src:
        return Tensor(values.copy())
    if src < 2:
        raise InterpolationError(f'Cannot interpolate a table with {src} entries to {num_frames}')

    wide = values.astype(np.float64)
    positions = np.linspace(0.0, 1.0, num_frames) if num_frames > 1 else np.zeros(1)
    scaled = positions * (src - 1)
    lower = np.minimum(np.floor(scaled).astype(np.int64), src - 2)
    frac = (scaled - lower)[:, None]
    resampled = (1.0 - frac) * wide[lower] + frac * wide[lower + 1]
    logger.debug(f'Interpolated temporal positional embedding {src} -> {num_frames}')
    return Tensor(resampled)
