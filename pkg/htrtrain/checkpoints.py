"""
HLNS checkpoint container.

Layout, little-endian throughout:

    magic 'HLNS' | u32 version
    u32 length + UTF-8 ModelSpec JSON
    u32 epoch | u64 seed
    u32 layer count, then per layer: u16 name length + name, u64 offset, u64 length
    u64 D | D × f64 parameters | D × f64 momentum buffers
    u32 stats count, then per batch-norm layer: u16 name length + name, u32 width,
        width × f64 running mean, width × f64 running variance
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from adcore.params import DTYPE, ParamVector
from hesslens.exceptions import DimensionError, FormatError
from nnmodels.networks import LayerRegistry, RunningStats, plan_layers
from nnmodels.specs import ModelSpec

logger = logging.getLogger(__name__)

MAGIC = b'HLNS'
VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: ParamVector
    momentum: torch.Tensor
    epoch: int
    seed: int
    running: RunningStats

    @property
    def registry(self):
        return LayerRegistry(self.spec, plan_layers(self.spec))


class _Reader:
    def __init__(self, payload, path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise FormatError(f'{self.path}: truncated at byte {self.offset} (needed {size} more)')
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def text(self, length_fmt):
        return self.take(self.unpack(length_fmt)).decode('utf-8')

    def floats(self, count):
        return torch.from_numpy(np.frombuffer(self.take(8 * count), dtype='<f8').copy()).to(DTYPE)


def _text(value, length_fmt):
    encoded = value.encode('utf-8')
    return struct.pack(length_fmt, len(encoded)) + encoded


def _floats(tensor):
    return np.ascontiguousarray(tensor.detach().numpy(), dtype='<f8').tobytes()


def save_checkpoint(checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = checkpoint.params
    parts = [MAGIC, struct.pack('<I', VERSION), _text(checkpoint.spec.to_json(), '<I')]
    parts.append(struct.pack('<IQ', checkpoint.epoch, checkpoint.seed))
    parts.append(struct.pack('<I', params.num_layers))
    for segment in params.layer_map:
        parts.append(_text(segment.name, '<H') + struct.pack('<QQ', segment.offset, segment.length))
    parts.append(struct.pack('<Q', params.dim))
    parts.append(_floats(params.values))
    parts.append(_floats(checkpoint.momentum))
    names = checkpoint.running.names()
    parts.append(struct.pack('<I', len(names)))
    for name in names:
        mean, var = checkpoint.running.get(name)
        parts.append(_text(name, '<H') + struct.pack('<I', mean.numel()) + _floats(mean) + _floats(var))
    path.write_bytes(b''.join(parts))
    logger.info('wrote checkpoint for epoch %d to %s', checkpoint.epoch, path)
    return path


def load_checkpoint(path, spec=None):
    """
    Decode an HLNS file, checking magic, version and every length.

    When ``spec`` is given the stored parameters must fit it, otherwise a
    DimensionError is raised.
    """
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise FormatError(f'{path}: not an HLNS checkpoint')
    version = reader.unpack('<I')
    if version != VERSION:
        raise FormatError(f'{path}: unsupported checkpoint version {version}')
    try:
        stored_spec = ModelSpec.from_dict(json.loads(reader.text('<I')))
    except (ValueError, TypeError) as exc:
        raise FormatError(f'{path}: unreadable model spec: {exc}') from exc
    epoch, seed = reader.unpack('<IQ')

    names = []
    for _ in range(reader.unpack('<I')):
        name = reader.text('<H')
        offset, length = reader.unpack('<QQ')
        names.append((name, offset, length))
    dim = reader.unpack('<Q')
    registry = LayerRegistry(stored_spec, plan_layers(stored_spec))
    expected = [(s.name, s.offset, s.length) for s in registry.layer_map]
    if names != expected or dim != registry.dim:
        raise DimensionError(f'{path}: name table does not match the stored model spec')
    if spec is not None:
        target = LayerRegistry(spec, plan_layers(spec))
        if [(s.name, s.offset, s.length) for s in target.layer_map] != expected:
            raise DimensionError(
                f'{path}: checkpoint has {dim} parameters in {len(names)} layers, '
                f'model spec expects {target.dim} in {target.num_layers}'
            )

    values = reader.floats(dim)
    momentum = reader.floats(dim)
    stats = {}
    for _ in range(reader.unpack('<I')):
        name = reader.text('<H')
        width = reader.unpack('<I')
        stats[name] = (reader.floats(width), reader.floats(width))
    if reader.offset != len(reader.payload):
        raise FormatError(f'{path}: {len(reader.payload) - reader.offset} trailing bytes')
    return Checkpoint(
        spec=stored_spec,
        params=ParamVector(values, registry.layer_map),
        momentum=momentum,
        epoch=epoch,
        seed=seed,
        running=RunningStats(stats),
    )
