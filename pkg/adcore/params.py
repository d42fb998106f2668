"""Flat parameter vectors with a per-layer index map."""
from dataclasses import dataclass

import torch

from hesslens.exceptions import ConfigurationError, DimensionError

DTYPE = torch.float64


@dataclass(frozen=True)
class LayerSegment:
    name: str
    offset: int
    length: int

    @property
    def stop(self):
        return self.offset + self.length

    @property
    def slice(self):
        return slice(self.offset, self.stop)


class ParamVector:
    """
    A length-D float64 vector together with the layer segments covering it.

    Segments are contiguous, disjoint, in declaration order and cover [0, D).
    Instances are treated as immutable snapshots: every arithmetic helper
    returns a new vector.
    """

    __slots__ = ('values', 'layer_map')

    def __init__(self, values, layer_map):
        values = torch.as_tensor(values, dtype=DTYPE)
        if values.dim() != 1:
            raise DimensionError(f'parameter values must be 1-D, got shape {tuple(values.shape)}')
        layer_map = tuple(layer_map)
        expected = 0
        for segment in layer_map:
            if segment.offset != expected or segment.length <= 0:
                raise ConfigurationError(
                    f'layer {segment.name!r} at offset {segment.offset} breaks the contiguous layout'
                )
            expected = segment.stop
        if expected != values.numel():
            raise DimensionError(f'layer map covers {expected} entries but vector has {values.numel()}')
        self.values = values
        self.layer_map = layer_map

    @classmethod
    def from_sizes(cls, values, named_sizes):
        segments, offset = [], 0
        for name, length in named_sizes:
            segments.append(LayerSegment(name, offset, int(length)))
            offset += int(length)
        return cls(values, segments)

    @property
    def dim(self):
        return self.values.numel()

    @property
    def num_layers(self):
        return len(self.layer_map)

    @property
    def layer_names(self):
        return [segment.name for segment in self.layer_map]

    def segment(self, layer):
        if not 0 <= layer < self.num_layers:
            raise ConfigurationError(f'layer index {layer} outside [0, {self.num_layers})')
        return self.layer_map[layer]

    def layer(self, layer):
        return self.values[self.segment(layer).slice]

    def with_values(self, values):
        values = torch.as_tensor(values, dtype=DTYPE)
        if values.shape != self.values.shape:
            raise DimensionError(f'expected {self.dim} values, got {values.numel()}')
        return ParamVector(values, self.layer_map)

    def zeros_like(self):
        return self.with_values(torch.zeros_like(self.values))

    def embed(self, layer, layer_values):
        """Zero-padded full vector whose only nonzero slice is ``layer``."""
        segment = self.segment(layer)
        layer_values = torch.as_tensor(layer_values, dtype=DTYPE)
        if layer_values.numel() != segment.length:
            raise DimensionError(
                f'layer {segment.name!r} has {segment.length} parameters, got {layer_values.numel()}'
            )
        full = torch.zeros(self.dim, dtype=DTYPE)
        full[segment.slice] = layer_values
        return full

    def snapshot(self):
        return ParamVector(self.values.detach().clone(), self.layer_map)

    def dot(self, other):
        return float(torch.dot(self.values, _values_of(other, self.dim)))

    def __add__(self, other):
        return self.with_values(self.values + _values_of(other, self.dim))

    def __sub__(self, other):
        return self.with_values(self.values - _values_of(other, self.dim))

    def __mul__(self, scalar):
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __len__(self):
        return self.dim

    def __repr__(self):
        return f'ParamVector(dim={self.dim}, layers={self.layer_names})'


def _values_of(vector, dim):
    values = vector.values if isinstance(vector, ParamVector) else torch.as_tensor(vector, dtype=DTYPE)
    if values.numel() != dim:
        raise DimensionError(f'expected a vector of dimension {dim}, got {values.numel()}')
    return values.reshape(-1)
