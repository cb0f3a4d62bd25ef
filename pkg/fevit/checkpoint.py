"""
SFAV1 checkpoint format.

Little-endian throughout, no padding:

    magic        5 bytes   b'SFAV1'
    version      u8        1
    meta length  u32, followed by UTF-8 JSON meta text
    record count u32
    per record (sorted by name):
        name length u16, followed by UTF-8 name
        ndim        u8
        dims        ndim x u32
        values      prod(dims) x f32
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import (
    CheckpointCorruptError,
    CheckpointIOError,
    CheckpointMagicError,
    CheckpointVersionError,
    RecordLengthError,
    UnknownGroupError,
)
from .model import GROUPS, FEModelConfig, ParamStore
from .utils import PathType

logger = logging.getLogger(__name__)

MAGIC = b'SFAV1'
VERSION = 1
VALUE_DTYPE = np.dtype('<f4')


@dataclass
class Checkpoint:
    """Raw records (32-bit values) plus metadata, as stored in an SFAV1 stream."""
    records: Dict[str, np.ndarray]
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> FEModelConfig:
        return FEModelConfig.from_dict(self.meta['config'])

    @property
    def group_map(self) -> Dict[str, str]:
        return dict(self.meta.get('groups', {}))

    def group_records(self, group: str) -> Dict[str, np.ndarray]:
        groups = self.group_map
        return {name: values for name, values in sorted(self.records.items()) if groups.get(name) == group}

    def has_group(self, group: str) -> bool:
        return group in self.group_map.values()

    def to_store(self) -> ParamStore:
        store = ParamStore()
        store.freeze_flags = {g: bool(v) for g, v in self.meta.get('freeze', {}).items()}
        groups = self.group_map
        for name in sorted(self.records):
            store.add(groups[name], name, Tensor(self.records[name]))
        return store

    @classmethod
    def from_store(cls, store: ParamStore, meta: Dict[str, Any]) -> 'Checkpoint':
        records = {name: np.asarray(t.data, dtype=VALUE_DTYPE) for name, t in store.items()}
        full_meta = dict(meta)
        full_meta['groups'] = store.group_map()
        full_meta['freeze'] = {g: bool(store.freeze_flags.get(g, False)) for g in store.groups}
        return cls(records=records, meta=full_meta)


def make_meta(config: FEModelConfig, stage: str, epoch: int = 0, dataset_seed: int = 0, mode: str = 'baseline',
              **extra: Any) -> Dict[str, Any]:
    """
    Standard checkpoint metadata.

    :param config: architecture snapshot
    :param stage: stage label, e.g. 'stage1', 'stage2', 'image'
    :param epoch: epochs trained
    :param dataset_seed: seed of the dataset the weights were trained on
    :param mode: forward mode the weights belong to
    :return: metadata dictionary (JSON serializable)
    """
    meta = dict(config=config.to_dict(), stage=stage, epoch=epoch, dataset_seed=dataset_seed, mode=mode)
    meta.update(extra)
    return meta


def encode(checkpoint: Checkpoint) -> bytes:
    meta_text = json.dumps(checkpoint.meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts: List[bytes] = [MAGIC, struct.pack('<B', VERSION), struct.pack('<I', len(meta_text)), meta_text]
    parts.append(struct.pack('<I', len(checkpoint.records)))
    for name in sorted(checkpoint.records):
        values = np.ascontiguousarray(checkpoint.records[name], dtype=VALUE_DTYPE)
        encoded_name = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack('<B', values.ndim))
        parts.append(struct.pack(f'<{values.ndim}I', *values.shape))
        parts.append(values.tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointCorruptError(f'Stream truncated while reading {what} '
                                         f'(need {size} bytes at offset {self.offset}, {self.remaining} left)')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def decode(data: bytes) -> Checkpoint:
    """
    Parse an SFAV1 stream.

    :param data: raw bytes
    :return: checkpoint
    """
    reader = _Reader(data)
    magic = reader.data[:len(MAGIC)]
    if magic != MAGIC:
        raise CheckpointMagicError(f'Bad magic {magic!r}, expected {MAGIC!r}')
    reader.offset = len(MAGIC)
    (version, ) = reader.unpack('<B', 'version')
    if version != VERSION:
        raise CheckpointVersionError(f'Unsupported checkpoint version {version} (supported: {VERSION})')

    (meta_length, ) = reader.unpack('<I', 'meta length')
    try:
        meta = json.loads(reader.take(meta_length, 'meta').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f'Cannot decode checkpoint meta: {e}')

    (count, ) = reader.unpack('<I', 'record count')
    records: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_length, ) = reader.unpack('<H', f'name length of record #{index}')
        try:
            name = reader.take(name_length, f'name of record #{index}').decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointCorruptError(f'Cannot decode name of record #{index}: {e}')
        (ndim, ) = reader.unpack('<B', f"ndim of record '{name}'")
        shape = reader.unpack(f'<{ndim}I', f"dims of record '{name}'")
        num_values = int(np.prod(shape, dtype=np.int64))
        num_bytes = num_values * VALUE_DTYPE.itemsize
        if num_bytes > reader.remaining:
            raise RecordLengthError(f"Record '{name}' declares shape {tuple(shape)} ({num_values} values) but only "
                                    f'{reader.remaining // VALUE_DTYPE.itemsize} values remain in the stream')
        values = np.frombuffer(reader.take(num_bytes, f"values of record '{name}'"), dtype=VALUE_DTYPE)
        records[name] = values.reshape(shape).copy()
    if reader.remaining:
        if records:
            raise RecordLengthError(f"Record '{name}' declares shape {tuple(shape)} but {reader.remaining} more bytes "
                                    'follow its values')
        raise CheckpointCorruptError(f'{reader.remaining} unexpected trailing bytes after {count} records')

    _check_groups(records, meta)
    return Checkpoint(records=records, meta=meta)


def _check_groups(records: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
    groups = meta.get('groups')
    if not isinstance(groups, dict):
        raise UnknownGroupError('Checkpoint meta has no group map')
    for name in records:
        group = groups.get(name)
        if group not in GROUPS or not name.startswith(f'{group}/'):
            raise UnknownGroupError(f"Record '{name}' does not resolve to a known parameter group (got {group!r})")


def save(store: ParamStore, meta: Dict[str, Any]) -> bytes:
    """
    Serialize <store> as an SFAV1 byte stream. Records are written in lexicographic name order, so
    equal stores produce identical bytes.

    :param store: parameters
    :param meta: metadata (see make_meta); the group map and freeze flags are added automatically
    :return: byte stream
    """
    return encode(Checkpoint.from_store(store, meta))


def load(data: bytes) -> Tuple[ParamStore, Dict[str, Any]]:
    """
    Reconstruct a parameter store from an SFAV1 byte stream.

    :param data: byte stream
    :return: store and metadata
    """
    checkpoint = decode(data)
    return checkpoint.to_store(), checkpoint.meta


def write_file(path: PathType, checkpoint: Checkpoint) -> None:
    data = encode(checkpoint)
    try:
        with open(path, 'wb') as f:
            f.write(data)
    except OSError as e:
        raise CheckpointIOError(f"Cannot write checkpoint '{path}': {e}")
    logger.info(f"Saved checkpoint '{path}' ({len(data)} bytes, {len(checkpoint.records)} records)")


def save_file(path: PathType, store: ParamStore, meta: Dict[str, Any]) -> None:
    write_file(path, Checkpoint.from_store(store, meta))


def read_file(path: PathType) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointIOError(f"Cannot read checkpoint '{path}': {e}")
    try:
        return decode(data)
    except CheckpointCorruptError as e:
        raise type(e)(f"'{path}': {e}")


def load_file(path: PathType) -> Tuple[ParamStore, Dict[str, Any]]:
    checkpoint = read_file(path)
    return checkpoint.to_store(), checkpoint.meta
