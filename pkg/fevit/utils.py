import dataclasses
import hashlib
import logging
import os
import re
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union, get_args, get_origin

import numpy as np
from scipy import stats

from .errors import ConfigError, FevitError

PathType = Union[str, os.PathLike]
DataclassT = TypeVar('DataclassT')


def setup_logger(level: Union[int, str] = logging.INFO, path: Optional[str] = None) -> logging.Logger:
    """
    Setup "fevit" logger.

    :param level: log level (int or string)
    :param path: path to which log messages are written
    :return: fevit logger
    """
    logger = logging.getLogger("fevit")
    logger.setLevel(level)

    formatter = logging.Formatter('%(asctime)s.%(msecs)03d %(levelname)s: %(message)s', datefmt='%Y-%m-%d %H:%M:%S')

    ch = logging.StreamHandler(stream=sys.stdout)
    ch.setFormatter(formatter)
    logger.addHandler(ch)

    if path is not None:
        fh = logging.FileHandler(path)
        fh.setFormatter(formatter)
        logger.addHandler(fh)

    return logger


def ensure_dir(path: PathType) -> Path:
    """
    Create directory <path> (and parents) if it does not exist yet.

    :param path: directory
    :return: resolved directory path
    """
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FevitError(f"Cannot create output directory '{directory}': {e}")
    return directory.resolve()


def stable_hash(*parts: Any) -> int:
    """Return a 63-bit integer derived from the string form of <parts> (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256('\x1f'.join(str(p) for p in parts).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') >> 1


def make_rng(*parts: Any) -> np.random.Generator:
    """Return a numpy generator seeded from <parts>, e.g. (global seed, record name)."""
    return np.random.default_rng(np.random.SeedSequence(stable_hash(*parts)))


def truncated_normal(shape: Tuple[int, ...], seed: int, name: str, std: float = 0.02) -> np.ndarray:
    """
    Draw values from a normal distribution truncated at two standard deviations.

    The generator is seeded from (seed, name) so the value of a record does not depend on the
    order in which records are created.

    :param shape: shape of the array
    :param seed: global seed
    :param name: record name
    :param std: standard deviation before truncation
    :return: float64 array
    """
    rng = make_rng(seed, name)
    values = stats.truncnorm.rvs(-2.0, 2.0, size=int(np.prod(shape, dtype=np.int64)), random_state=rng)
    return (std * values).reshape(shape)


def config_hash(text: str) -> str:
    """Short SHA-256 hex digest of a canonical config text."""
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


# Same grammar as the search box configuration files: "<key> = <value>", one per line
conf_re = re.compile(r'^\s*(?P<key>[A-Za-z_]\w*)\s*=\s*(?P<value>[^#]*?)\s*(#.*)?$')
comment_re = re.compile(r'^\s*(#.*)?$')


def parse_conf_text(text: str, source: str = '<string>') -> Dict[str, str]:
    """
    Parse a flat "key = value" document. Lines starting with # and blank lines are ignored,
    trailing "# ..." comments are stripped.

    :param text: document text
    :param source: name used in error messages
    :return: dictionary of raw (string) values
    """
    d: Dict[str, str] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        if comment_re.match(line):
            continue
        match = conf_re.match(line)
        if not match:
            raise ConfigError(f'{source}:{line_number}: cannot parse line {line.strip()!r}')
        key = match.group('key')
        if key in d:
            raise ConfigError(f'{source}:{line_number}: duplicate key {key!r}')
        d[key] = match.group('value')
    return d


def parse_conf_file(conf_file: PathType) -> Dict[str, str]:
    """
    Parse configuration from a "key = value" file.

    :param conf_file: path to configuration file
    :return: dictionary of raw (string) values
    """
    try:
        with open(conf_file, mode='r') as f:
            content = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config file '{conf_file}': {e}")
    return parse_conf_text(content, source=str(conf_file))


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    origin = get_origin(annotation)
    if origin is Union:
        inner = [a for a in get_args(annotation) if a is not type(None)]
        if raw.lower() in ('none', ''):
            return None
        return _coerce(raw, inner[0], key)
    if origin in (tuple, Tuple):
        item_type = get_args(annotation)[0]
        return tuple(_coerce(part.strip(), item_type, key) for part in raw.split(',') if part.strip())
    try:
        if annotation is bool:
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f'Invalid value for {key!r}: {raw!r} (expected {annotation.__name__})')
    return raw


def coerce_values(cls: Type[DataclassT], raw: Dict[str, str]) -> Dict[str, Any]:
    """
    Convert raw string values to the types declared by dataclass <cls>.

    :param cls: target dataclass
    :param raw: raw values, e.g. from parse_conf_file
    :return: typed values
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    typed: Dict[str, Any] = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f'Unknown config key {key!r}')
        typed[key] = _coerce(value, fields[key].type, key)
    return typed


def format_conf_text(values: Dict[str, Any]) -> str:
    """Render values as a canonical (sorted) "key = value" document."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, tuple):
            value = ','.join(str(v) for v in value)
        lines.append(f'{key} = {value}')
    return '\n'.join(lines) + '\n'
