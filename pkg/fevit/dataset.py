"""
Synthetic sprite-motion datasets.

Video task: a bright square sprite moves through a clip made of `segments` equally long segments.
Every segment moves the sprite in one direction of a shared pool (evenly spaced angles) around a
per-clip anchor, and each class is a distinct ordering of that pool. Segment content depends only on
(direction, anchor, noise key), never on the segment's position in the clip, so the frames of two
clips with the same anchor form the same multiset whatever their classes are: the class can only be
read from the order of the frames.

Image task: a single frame with the sprite somewhere in one cell of a coarse grid; the label is the cell.
It is used to train a spatial encoder that never sees temporal order.
"""

import itertools
import logging
import math
import queue
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Tuple, TypeVar

import numpy as np

from .autodiff import default_dtype
from .errors import ConfigError, FevitError, FrameCountError
from .utils import make_rng

logger = logging.getLogger(__name__)

SPLITS = ('train', 'eval')
TASKS = ('video', 'image')
IMAGE_GRID = (2, 4)  # rows, columns

T = TypeVar('T')


@dataclass(frozen=True)
class DatasetSpec:
    """
    Parameters of a synthetic dataset. Generation is a pure function of (spec, split, index).

    :param seed: dataset seed (class orderings, anchors, noise)
    :param num_classes: K; for the video task at most segments! orderings exist
    :param train_clips_per_class: clips per class in the train split
    :param eval_clips_per_class: clips per class in the eval split
    :param source_frames: frames per generated clip (must be divisible by segments)
    :param image_size: frame height and width
    :param sprite_size: sprite edge length
    :param noise_std: standard deviation of additive Gaussian pixel noise
    :param segments: number of motion segments per clip
    :param speed: sprite displacement per source frame, in pixels
    :param channels: colour channels
    :param task: 'video' (order classification) or 'image' (single-frame location classification)
    """
    seed: int = 0
    num_classes: int = 8
    train_clips_per_class: int = 64
    eval_clips_per_class: int = 32
    source_frames: int = 128
    image_size: int = 32
    sprite_size: int = 5
    noise_std: float = 0.05
    segments: int = 4
    speed: float = 0.375
    channels: int = 3
    task: str = 'video'

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f'Unknown dataset task {self.task!r}, expected one of {TASKS}')
        for name in ('num_classes', 'train_clips_per_class', 'eval_clips_per_class', 'source_frames', 'image_size',
                     'sprite_size', 'segments', 'channels'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if self.noise_std < 0:
            raise ConfigError(f'noise_std must be non-negative, got {self.noise_std}')
        if self.task == 'image':
            if self.num_classes != IMAGE_GRID[0] * IMAGE_GRID[1]:
                raise ConfigError(f'The image task has {IMAGE_GRID[0] * IMAGE_GRID[1]} classes, got {self.num_classes}')
            return
        if self.source_frames % self.segments != 0:
            raise ConfigError(f'source_frames {self.source_frames} is not divisible by segments {self.segments}')
        if self.num_classes > math.factorial(self.segments):
            raise ConfigError(f'{self.segments} segments allow at most {math.factorial(self.segments)} classes, '
                              f'got {self.num_classes}')
        if self.anchor_range[0] > self.anchor_range[1]:
            raise ConfigError(f'Sprite motion does not fit into a {self.image_size}px frame; '
                              'reduce speed or sprite_size')

    @property
    def segment_frames(self) -> int:
        return self.source_frames // self.segments

    @property
    def anchor_range(self) -> Tuple[int, int]:
        """Inclusive range of anchor coordinates that keep the whole sprite trajectory inside the frame."""
        half = self.sprite_size // 2
        reach = math.ceil(self.speed * (self.segment_frames - 1) / 2)
        return half + reach, self.image_size - 1 - half - reach

    @property
    def frames_per_clip(self) -> int:
        return 1 if self.task == 'image' else self.source_frames

    def clips_per_class(self, split: str) -> int:
        _check_split(split)
        return self.train_clips_per_class if split == 'train' else self.eval_clips_per_class

    def split_size(self, split: str) -> int:
        return self.num_classes * self.clips_per_class(split)


def _check_split(split: str) -> None:
    if split not in SPLITS:
        raise ConfigError(f'Unknown split {split!r}, expected one of {SPLITS}')


def direction_pool(segments: int) -> np.ndarray:
    """Unit (dy, dx) motion directions at evenly spaced angles, shape [segments, 2]."""
    angles = 2.0 * np.pi * np.arange(segments) / segments
    # Snap to exact values so axis-aligned directions have no round-off
    return np.round(np.stack([np.sin(angles), np.cos(angles)], axis=1), 12)


def class_orderings(spec: DatasetSpec) -> List[Tuple[int, ...]]:
    """The direction ordering of each class: K distinct permutations of range(segments), chosen by the seed."""
    permutations = list(itertools.permutations(range(spec.segments)))
    chosen = make_rng(spec.seed, 'class_orderings').choice(len(permutations), size=spec.num_classes, replace=False)
    return [permutations[i] for i in chosen]


def _locate(spec: DatasetSpec, split: str, index: int) -> Tuple[int, int]:
    """Map a split index to (label, index within the class)."""
    size = spec.split_size(split)
    if not 0 <= index < size:
        raise IndexError(f"Index {index} is outside the '{split}' split of size {size}")
    return index % spec.num_classes, index // spec.num_classes


def _draw_sprite(frame: np.ndarray, center: Tuple[int, int], sprite_size: int) -> None:
    half = sprite_size // 2
    y0, x0 = center[0] - half, center[1] - half
    h, w = frame.shape[:2]
    frame[max(y0, 0):min(y0 + sprite_size, h), max(x0, 0):min(x0 + sprite_size, w)] = 1.0


def _noisy(frame: np.ndarray, noise_std: float, *noise_key: object) -> np.ndarray:
    if noise_std > 0:
        frame = frame + noise_std * make_rng(*noise_key).standard_normal(frame.shape)
    return np.clip(frame, 0.0, 1.0)


def render_clip(
    spec: DatasetSpec,
    ordering: Iterable[int],
    anchor: Tuple[int, int],
    noise_key: Tuple[object, ...],
    frame_indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Render (selected frames of) a clip.

    :param spec: dataset parameters
    :param ordering: direction index of every segment
    :param anchor: (y, x) trajectory center of every segment
    :param noise_key: noise seed parts; frame j of the segment moving in direction k uses (*noise_key, k, j)
    :param frame_indices: source frames to render, defaults to all
    :return: array [T, H, W, C] with values in [0, 1]
    """
    ordering = tuple(ordering)
    directions = direction_pool(spec.segments)
    seg_len = spec.segment_frames
    if frame_indices is None:
        frame_indices = np.arange(spec.source_frames)

    frames = np.zeros((len(frame_indices), spec.image_size, spec.image_size, spec.channels))
    for out, source_index in enumerate(frame_indices):
        segment, j = divmod(int(source_index), seg_len)
        k = ordering[segment]
        offset = directions[k] * spec.speed * (j - (seg_len - 1) / 2)
        center = (int(np.rint(anchor[0] + offset[0])), int(np.rint(anchor[1] + offset[1])))
        frame = np.zeros(frames.shape[1:])
        _draw_sprite(frame, center, spec.sprite_size)
        frames[out] = _noisy(frame, spec.noise_std, *noise_key, k, j)
    return frames.astype(default_dtype())


def _clip_anchor(spec: DatasetSpec, split: str, within: int) -> Tuple[int, int]:
    low, high = spec.anchor_range
    y, x = make_rng(spec.seed, split, within, 'anchor').integers(low, high + 1, size=2)
    return int(y), int(x)


def make_clip(spec: DatasetSpec, split: str, index: int,
              frame_indices: Optional[np.ndarray] = None) -> Tuple[np.ndarray, int]:
    """
    Generate clip <index> of <split>.

    Clips are laid out class-major inside the split (index % K is the label). The anchor and the
    segment noise depend only on the index within the class, so every class sees the same
    collection of frames.

    :param spec: dataset parameters (video task)
    :param split: 'train' or 'eval'
    :param index: clip index within the split
    :param frame_indices: source frames to render, defaults to all source_frames
    :return: video [T, H, W, C] and label
    """
    if spec.task != 'video':
        raise ConfigError(f"make_clip needs a video dataset, got task '{spec.task}'")
    label, within = _locate(spec, split, index)
    ordering = class_orderings(spec)[label]
    anchor = _clip_anchor(spec, split, within)
    video = render_clip(spec, ordering, anchor, (spec.seed, split, within), frame_indices)
    return video, label


def make_frame(spec: DatasetSpec, split: str, index: int) -> Tuple[np.ndarray, int]:
    """
    Generate image <index> of <split> for the single-frame location task.

    :param spec: dataset parameters (image task)
    :param split: 'train' or 'eval'
    :param index: image index within the split
    :return: frame [H, W, C] and label (grid cell, row-major)
    """
    if spec.task != 'image':
        raise ConfigError(f"make_frame needs an image dataset, got task '{spec.task}'")
    label, within = _locate(spec, split, index)
    rows, cols = IMAGE_GRID
    row, col = divmod(label, cols)
    half = spec.sprite_size // 2
    cell_h, cell_w = spec.image_size / rows, spec.image_size / cols
    # Sprite centers stay inside the cell and inside the frame
    y_low, y_high = max(int(math.ceil(row * cell_h)), half), min(int(math.ceil((row + 1) * cell_h)) - 1,
                                                                  spec.image_size - 1 - half)
    x_low, x_high = max(int(math.ceil(col * cell_w)), half), min(int(math.ceil((col + 1) * cell_w)) - 1,
                                                                  spec.image_size - 1 - half)
    rng = make_rng(spec.seed, split, index, 'position')
    center = (int(rng.integers(y_low, y_high + 1)), int(rng.integers(x_low, x_high + 1)))
    frame = np.zeros((spec.image_size, spec.image_size, spec.channels))
    _draw_sprite(frame, center, spec.sprite_size)
    return _noisy(frame, spec.noise_std, spec.seed, split, index, 'noise').astype(default_dtype()), label


def frame_indices(source_frames: int, frames: int) -> np.ndarray:
    """
    Uniform-stride, phase-0 subsampling of <source_frames> to <frames>.

    :return: indices floor(i * source_frames / frames) for i in [0, frames)
    """
    if frames < 1:
        raise FrameCountError(f'Frame count must be positive, got {frames}')
    if frames > source_frames:
        raise FrameCountError(f'Cannot sample {frames} frames from clips with {source_frames} source frames')
    return (np.arange(frames) * source_frames) // frames


def make_sample(spec: DatasetSpec, split: str, index: int, frames: int) -> Tuple[np.ndarray, int]:
    """A model input [T, H, W, C] with its label, for either task."""
    if spec.task == 'image':
        if frames != 1:
            raise FrameCountError(f'Image datasets provide single frames, got a request for {frames}')
        frame, label = make_frame(spec, split, index)
        return frame[None], label
    return make_clip(spec, split, index, frame_indices(spec.source_frames, frames))


def _check_frames(spec: DatasetSpec, frames: int) -> None:
    if spec.task == 'image':
        if frames != 1:
            raise FrameCountError(f'Image datasets provide single frames, got a request for {frames}')
    else:
        frame_indices(spec.source_frames, frames)


def epoch_order(spec: DatasetSpec, split: str, seed: int) -> np.ndarray:
    return make_rng(spec.seed, split, seed, 'shuffle').permutation(spec.split_size(split))


def batch_iter(spec: DatasetSpec, split: str, batch: int, frames: int,
               seed: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Iterate over one epoch of shuffled, non-overlapping batches; the last short batch is dropped.

    :param spec: dataset parameters
    :param split: 'train' or 'eval'
    :param batch: clips per batch
    :param frames: frames per clip (T <= source_frames)
    :param seed: shuffle seed, e.g. derived from (run seed, epoch)
    :return: iterator over (videos [B, T, H, W, C], labels [B])
    """
    _check_split(split)
    _check_frames(spec, frames)
    if batch < 1:
        raise ConfigError(f'Batch size must be positive, got {batch}')
    order = epoch_order(spec, split, seed)
    for start in range(0, len(order) - batch + 1, batch):
        samples = [make_sample(spec, split, int(i), frames) for i in order[start:start + batch]]
        yield np.stack([s[0] for s in samples]), np.array([s[1] for s in samples], dtype=np.int64)


def load_split(spec: DatasetSpec, split: str, frames: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    The whole split in index order (nothing dropped).

    :return: videos [N, T, H, W, C] and labels [N]
    """
    _check_split(split)
    _check_frames(spec, frames)
    samples = [make_sample(spec, split, i, frames) for i in range(spec.split_size(split))]
    return np.stack([s[0] for s in samples]), np.array([s[1] for s in samples], dtype=np.int64)


def steps_per_epoch(spec: DatasetSpec, batch: int) -> int:
    return spec.split_size('train') // batch


_END = object()


class _Failure:
    def __init__(self, error: BaseException) -> None:
        self.error = error


def prefetch(iterator: Iterable[T], depth: int = 2) -> Iterator[T]:
    """
    Prepare items of <iterator> on a worker thread, at most <depth> ahead of the consumer.
    Items are delivered in the original order; an exception in the worker is re-raised here.

    :param iterator: source iterator (e.g. batch_iter)
    :param depth: queue size; 0 disables prefetching
    :return: iterator over the same items
    """
    if depth <= 0:
        yield from iterator
        return

    items: 'queue.Queue[object]' = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def put(item: object) -> bool:
        # False once the consumer has gone away
        while not stop.is_set():
            try:
                items.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def work() -> None:
        try:
            for item in iterator:
                if not put(item):
                    return
            put(_END)
        except BaseException as e:  # noqa: B902
            put(_Failure(e))

    worker = threading.Thread(target=work, name='fevit-prefetch', daemon=True)
    worker.start()
    try:
        while True:
            item = items.get()
            if item is _END:
                return
            if isinstance(item, _Failure):
                if isinstance(item.error, FevitError):
                    raise item.error
                raise FevitError(f'Batch preparation failed: {item.error}') from item.error
            yield item  # type: ignore[misc]
    finally:
        stop.set()
        worker.join(timeout=1.0)
