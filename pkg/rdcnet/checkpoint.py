"""
Checkpoint Module
Binary model checkpoints with optimizer state, so training can resume exactly.

Layout (little-endian):

    b"RDCN"
    uint32  format version
    uint32  config length, canonical JSON of RDCNetConfig
    uint64  training step
    float64 best validation score
    uint32  parameter record count, records
    uint32  moment record count, records ("m/<param>", "v/<param>")

    record: uint16 name length, UTF-8 name, uint8 ndim, uint32 per dim, float32 values
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from rdcnet.errors import ConfigError, DataIOError, FormatError, ShapeError
from rdcnet.model import ModelParams, RDCNetConfig, parameter_shapes
from rdcnet.tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)

MAGIC = b"RDCN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: RDCNetConfig
    params: Dict[str, np.ndarray]
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best_score: float = -1.0
    version: int = FORMAT_VERSION


def from_params(params: ModelParams, step: Optional[int] = None, best_score: float = -1.0,
                include_moments: bool = True) -> Checkpoint:
    """Snapshot a parameter group; `step` defaults to the optimizer's step count."""
    return Checkpoint(
        config=params.config,
        params={name: t.data.copy() for name, t in params.items()},
        first_moment={k: v.copy() for k, v in params.first_moment.items()} if include_moments else {},
        second_moment={k: v.copy() for k, v in params.second_moment.items()} if include_moments else {},
        step=params.step_count if step is None else int(step),
        best_score=float(best_score),
    )


def restore_params(checkpoint: Checkpoint, config: Optional[RDCNetConfig] = None) -> ModelParams:
    """
    Rebuild trainable parameters from a checkpoint.

    Names and shapes are checked against the topology of `config` (the
    checkpoint's own config by default); the first parameter that is
    missing or has the wrong shape is named in the ShapeError.
    """
    config = config or checkpoint.config
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in checkpoint.params:
            raise ShapeError(f"checkpoint has no parameter {name!r}", field=name)
        found = tuple(checkpoint.params[name].shape)
        if found != tuple(shape):
            raise ShapeError(f"parameter {name!r} has shape {found}, model expects {tuple(shape)}", field=name)
    extra = [name for name in checkpoint.params if name not in expected]
    if extra:
        raise ShapeError(f"checkpoint has unexpected parameter {extra[0]!r}", field=extra[0])

    params = ModelParams(config)
    dtype = default_dtype()
    for name in expected:
        params.add(name, Tensor(checkpoint.params[name].astype(dtype), track_grad=True, name=name))
        if name in checkpoint.first_moment:
            params.first_moment[name] = checkpoint.first_moment[name].astype(dtype)
            params.second_moment[name] = checkpoint.second_moment[name].astype(dtype)
    params.step_count = checkpoint.step
    return params


# ============== Encoding ==============

def _canonical_config(config: RDCNetConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':')).encode('utf-8')


def _record(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode('utf-8')
    values = np.ascontiguousarray(values, dtype='<f4')
    parts = [struct.pack('<H', len(encoded)), encoded, struct.pack('<B', values.ndim)]
    parts.append(struct.pack(f'<{values.ndim}I', *values.shape))
    parts.append(values.tobytes())
    return b''.join(parts)


def to_bytes(checkpoint: Checkpoint) -> bytes:
    config = _canonical_config(checkpoint.config)
    moments = [(f"m/{k}", v) for k, v in checkpoint.first_moment.items()]
    moments += [(f"v/{k}", v) for k, v in checkpoint.second_moment.items()]
    parts = [
        MAGIC,
        struct.pack('<I', checkpoint.version),
        struct.pack('<I', len(config)), config,
        struct.pack('<Q', checkpoint.step),
        struct.pack('<d', checkpoint.best_score),
        struct.pack('<I', len(checkpoint.params)),
    ]
    parts += [_record(name, values) for name, values in checkpoint.params.items()]
    parts.append(struct.pack('<I', len(moments)))
    parts += [_record(name, values) for name, values in moments]
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.offset}", path=self.source)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def record(self) -> Tuple[str, np.ndarray]:
        name = self.take(self.unpack('<H')).decode('utf-8')
        ndim = self.unpack('<B')
        shape = tuple(struct.unpack(f'<{ndim}I', self.take(4 * ndim)))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(self.take(4 * count), dtype='<f4').reshape(shape)
        return name, values.astype(np.float32)


def from_bytes(data: bytes, source: str = '<bytes>') -> Checkpoint:
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError("not an RDCNet checkpoint (bad magic)", path=source)
    version = reader.unpack('<I')
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}", path=source)
    try:
        config = RDCNetConfig.from_dict(json.loads(reader.take(reader.unpack('<I')).decode('utf-8')))
    except (ValueError, TypeError, ConfigError) as e:
        raise FormatError(f"unreadable config block: {e}", path=source) from e
    step = reader.unpack('<Q')
    best_score = reader.unpack('<d')

    params: Dict[str, np.ndarray] = {}
    for _ in range(reader.unpack('<I')):
        name, values = reader.record()
        params[name] = values
    first: Dict[str, np.ndarray] = {}
    second: Dict[str, np.ndarray] = {}
    for _ in range(reader.unpack('<I')):
        name, values = reader.record()
        kind, _, param = name.partition('/')
        if kind == 'm':
            first[param] = values
        elif kind == 'v':
            second[param] = values
        else:
            raise FormatError(f"unknown moment record {name!r}", path=source)
    if reader.offset != len(data):
        raise FormatError(f"{len(data) - reader.offset} trailing bytes after the last record", path=source)
    if set(first) != set(second):
        raise FormatError("first and second moment records do not pair up", path=source)
    return Checkpoint(config, params, first, second, step=step, best_score=best_score, version=version)


# ============== Files ==============

def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    """Write atomically: the target is replaced only once the whole file is on disk."""
    path = Path(path)
    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(to_bytes(checkpoint))
        os.replace(tmp, path)
    except OSError as e:
        raise DataIOError(f"Could not write checkpoint: {e}", path=path) from e
    logger.debug(f"Saved checkpoint at step {checkpoint.step} to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"Could not read checkpoint: {e}", path=path) from e
    return from_bytes(data, source=str(path))
