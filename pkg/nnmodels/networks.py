"""Layer registry, initialization and the functional forward pass."""
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from adcore.params import DTYPE, LayerSegment, ParamVector
from hesslens.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    kind: str  # linear | residual | conv | batchnorm
    offset: int
    shapes: tuple  # ((param name, shape), ...) in storage order
    trainable: bool = True
    attached_to: int = None
    is_head: bool = False

    @property
    def length(self):
        return sum(math.prod(shape) for _, shape in self.shapes)

    @property
    def segment(self):
        return LayerSegment(self.name, self.offset, self.length)

    def unpack(self, theta):
        """Views of this layer's tensors inside the flat vector."""
        tensors, offset = {}, self.offset
        for pname, shape in self.shapes:
            size = math.prod(shape)
            tensors[pname] = theta[offset:offset + size].view(shape)
            offset += size
        return tensors


class RunningStats:
    """Batch-norm running mean/variance, keyed by batch-norm layer name."""

    def __init__(self, stats=None):
        self.stats = {name: (mean.clone(), var.clone()) for name, (mean, var) in (stats or {}).items()}

    def get(self, name):
        return self.stats[name]

    def update(self, name, mean, var, momentum=BN_MOMENTUM):
        old_mean, old_var = self.stats[name]
        self.stats[name] = (
            (1 - momentum) * old_mean + momentum * mean.detach(),
            (1 - momentum) * old_var + momentum * var.detach(),
        )

    def copy(self):
        return RunningStats(self.stats)

    def names(self):
        return list(self.stats)

    def __len__(self):
        return len(self.stats)


class LayerRegistry:
    """Ordered layer descriptors of a built model; order is forward execution order."""

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = tuple(layers)
        self._norms = {layer.attached_to: index for index, layer in enumerate(self.layers) if layer.kind == 'batchnorm'}

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def dim(self):
        return sum(layer.length for layer in self.layers)

    @property
    def names(self):
        return [layer.name for layer in self.layers]

    @property
    def layer_map(self):
        return tuple(layer.segment for layer in self.layers)

    def norm_for(self, index):
        return self._norms.get(index)

    def initial_running_stats(self):
        stats = {}
        for layer in self.layers:
            if layer.kind == 'batchnorm':
                width = layer.shapes[0][1][0]
                stats[layer.name] = (torch.zeros(width, dtype=DTYPE), torch.ones(width, dtype=DTYPE))
        return RunningStats(stats)

    def function(self, running=None, training=False, update_running=True):
        return ModelFunction(self, running=running, training=training, update_running=update_running)

    def wrap(self, values):
        return ParamVector(values, self.layer_map)


class ModelFunction:
    """``f(theta, inputs) -> logits`` closure used by the autodiff routines."""

    def __init__(self, registry, running=None, training=False, update_running=True):
        self.registry = registry
        self.running = running
        self.training = training
        self.update_running = update_running
        self.input_shape = registry.spec.input_shape

    def __call__(self, theta, inputs):
        return forward(
            theta,
            self.registry,
            inputs,
            training=self.training,
            running=self.running,
            update_running=self.update_running,
        )


def plan_layers(spec):
    """Descriptor list for ``spec`` with offsets assigned in storage order."""
    spec.validate()
    planned = []

    def add(name, kind, shapes, attached_to=None, is_head=False):
        planned.append((name, kind, tuple(shapes), attached_to, is_head))
        return len(planned) - 1

    def add_norm(owner, width):
        if spec.batch_norm:
            add(f'{planned[owner][0]}.bn', 'batchnorm', [('weight', (width,)), ('bias', (width,))], attached_to=owner)

    if spec.architecture == 'lenet':
        in_channels = spec.input_shape[0]
        k = spec.kernel_size
        for i, out_channels in enumerate(spec.channels):
            owner = add(f'conv{i}', 'conv', [('weight', (out_channels, in_channels, k, k)), ('bias', (out_channels,))])
            add_norm(owner, out_channels)
            in_channels = out_channels
        height, width = spec.feature_map_size()
        widths = (in_channels * height * width,) + spec.widths + (spec.num_classes,)
    else:
        widths = spec.widths

    last = len(widths) - 2
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        shapes = [('weight', (fan_out, fan_in)), ('bias', (fan_out,))]
        if i == last:
            add(f'fc{i}', 'linear', shapes, is_head=True)
            continue
        residual = spec.architecture == 'mlp-skip' and i > 0 and fan_in == fan_out
        owner = add(f'block{i}' if residual else f'fc{i}', 'residual' if residual else 'linear', shapes)
        add_norm(owner, fan_out)

    layers, offset = [], 0
    for name, kind, shapes, attached_to, is_head in planned:
        layer = LayerDescriptor(name, kind, offset, shapes, attached_to=attached_to, is_head=is_head)
        layers.append(layer)
        offset += layer.length
    if len(layers) < 3:
        logger.warning('model has %d layers; there is no strict middle band of layers', len(layers))
    return layers


def expected_parameter_count(spec):
    """Closed-form parameter count, independent of the registry walk."""
    bn = 2 if spec.batch_norm else 0
    if spec.architecture == 'lenet':
        count, in_channels, k = 0, spec.input_shape[0], spec.kernel_size
        for out_channels in spec.channels:
            count += out_channels * in_channels * k * k + out_channels + bn * out_channels
            in_channels = out_channels
        height, width = spec.feature_map_size()
        widths = (in_channels * height * width,) + spec.widths + (spec.num_classes,)
    else:
        count, widths = 0, spec.widths
    for i in range(len(widths) - 1):
        count += widths[i] * widths[i + 1] + widths[i + 1]
        if i < len(widths) - 2:
            count += bn * widths[i + 1]
    return count


def build(spec, seed):
    """Initialize parameters deterministically: Kaiming-uniform fan-in weights, zero biases."""
    layers = plan_layers(spec)
    generator = torch.Generator().manual_seed(int(seed))
    chunks = []
    for layer in layers:
        for pname, shape in layer.shapes:
            if layer.kind == 'batchnorm':
                fill = torch.ones(shape, dtype=DTYPE) if pname == 'weight' else torch.zeros(shape, dtype=DTYPE)
            elif pname == 'bias':
                fill = torch.zeros(shape, dtype=DTYPE)
            else:
                fan_in = math.prod(shape[1:])
                bound = math.sqrt(6.0 / fan_in)
                fill = torch.empty(shape, dtype=DTYPE).uniform_(-bound, bound, generator=generator)
            chunks.append(fill.reshape(-1))
    registry = LayerRegistry(spec, layers)
    params = ParamVector(torch.cat(chunks), registry.layer_map)
    logger.debug('built %s with %d parameters in %d layers', spec.architecture, params.dim, registry.num_layers)
    return params, registry


def forward(params, registry, inputs, *, training=False, running=None, update_running=True):
    """
    Pre-softmax scores for ``inputs``.

    In training mode batch-norm layers normalize with batch statistics and,
    when ``running`` is given and ``update_running`` is set, fold them into
    the running estimates. In evaluation mode they use ``running`` (or the
    initial zero-mean/unit-variance state).
    """
    theta = params.values if isinstance(params, ParamVector) else params
    spec = registry.spec
    x = getattr(inputs, 'inputs', inputs)
    x = torch.as_tensor(x, dtype=DTYPE)
    if spec.architecture == 'lenet':
        if tuple(x.shape[1:]) != spec.input_shape:
            raise ConfigurationError(f'model expects inputs {spec.input_shape}, got {tuple(x.shape[1:])}')
    else:
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != spec.widths[0]:
            raise ConfigurationError(f'model expects {spec.widths[0]} features, got {x.shape[1]}')
    if running is None and not training:
        running = registry.initial_running_stats()

    for index, layer in enumerate(registry.layers):
        if layer.kind == 'batchnorm':
            continue
        weights = layer.unpack(theta)
        norm = registry.norm_for(index)
        if layer.kind == 'conv':
            x = F.conv2d(x, weights['weight'], weights['bias'])
            x = _normalize(x, registry, norm, theta, training, running, update_running)
            x = F.avg_pool2d(torch.relu(x), 2)
        elif layer.kind == 'residual':
            branch = torch.relu(x) @ weights['weight'].T + weights['bias']
            x = x + _normalize(branch, registry, norm, theta, training, running, update_running)
        else:
            if x.dim() > 2:
                x = x.flatten(1)
            x = x @ weights['weight'].T + weights['bias']
            if not layer.is_head:
                x = torch.relu(_normalize(x, registry, norm, theta, training, running, update_running))
    return x


def _normalize(x, registry, norm, theta, training, running, update_running):
    if norm is None:
        return x
    layer = registry.layers[norm]
    affine = layer.unpack(theta)
    dims = (0,) if x.dim() == 2 else (0, 2, 3)
    shape = (1, -1) if x.dim() == 2 else (1, -1, 1, 1)
    if training:
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        if running is not None and update_running:
            count = x.numel() // x.shape[1]
            unbiased = var * count / (count - 1) if count > 1 else var
            running.update(layer.name, mean, unbiased)
    else:
        mean, var = running.get(layer.name)
    normalized = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + BN_EPS)
    return normalized * affine['weight'].view(shape) + affine['bias'].view(shape)


def middle_band(num_layers):
    """Layer indices l with ⌊L/4⌋ ≤ l < ⌈3L/4⌉."""
    return list(range(num_layers // 4, -(-3 * num_layers // 4)))
