"""Layerwise Hessian trace penalty and its gradient."""
import logging
import math

import numpy as np
import torch

from adcore.autodiff import cross_entropy, grad_of, hessian_vector, leaf
from adcore.params import DTYPE, ParamVector
from hesslens.exceptions import ConfigurationError, NumericError
from nnmodels.networks import middle_band

logger = logging.getLogger(__name__)

SELECTION_MODES = ('all', 'middle')


def select_layers(registry, mode):
    """
    Layer indices penalized by the trace regularizer.

    ``mode`` is ``all``, ``middle`` (⌊L/4⌋ ≤ l < ⌈3L/4⌉), or an explicit
    list of indices given as a sequence or a comma-separated string.
    """
    num_layers = registry if isinstance(registry, int) else registry.num_layers
    if mode == 'all':
        return tuple(range(num_layers))
    if mode == 'middle':
        band = tuple(middle_band(num_layers))
        if len(band) == num_layers:
            logger.warning('middle band of a %d-layer model covers every layer', num_layers)
        if not band:
            raise ConfigurationError(f'middle band of a {num_layers}-layer model is empty')
        return band

    if isinstance(mode, str):
        try:
            mode = [int(part) for part in mode.split(',') if part.strip()]
        except ValueError as exc:
            raise ConfigurationError(f'layer selection must be all, middle or i,j,k; got {mode!r}') from exc
    indices = sorted(set(int(i) for i in mode))
    if not indices:
        raise ConfigurationError('layer selection is empty')
    bad = [i for i in indices if not 0 <= i < num_layers]
    if bad:
        raise ConfigurationError(f'layer indices {bad} outside [0, {num_layers})')
    return tuple(indices)


def step_seed(seed, step):
    """Fresh 32-bit seed per optimizer step."""
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


def rademacher_probe(params, selection, seed, layer_weights=None):
    """±1 entries on the selected layer slices, scaled by √w_l, zeros elsewhere."""
    generator = torch.Generator().manual_seed(int(seed))
    signs = torch.randint(0, 2, (params.dim,), generator=generator).to(DTYPE) * 2.0 - 1.0
    probe = torch.zeros(params.dim, dtype=DTYPE)
    for layer in selection:
        segment = params.segment(layer).slice
        weight = 1.0 if layer_weights is None else float(layer_weights.get(layer, 1.0))
        probe[segment] = math.sqrt(weight) * signs[segment]
    return probe


def trace_penalty_gradient(loss_fn, params, selection, probes=1, seed=0, layer_weights=None):
    """
    ∂/∂θ of the Hutchinson estimate Σ_{l∈selection} w_l·v_lᵀ Hess_l v_l.

    For each probe the quadratic form vᵀ·Hess·v is built with a
    differentiable Hessian-vector product and differentiated once more.
    """
    if not selection:
        raise ConfigurationError('trace penalty needs a nonempty layer selection')
    if probes < 1:
        raise ConfigurationError(f'trace penalty needs at least one probe, got {probes}')
    total = torch.zeros(params.dim, dtype=DTYPE)
    for p in range(probes):
        probe_seed = int(seed) ^ p
        v = rademacher_probe(params, selection, probe_seed, layer_weights)
        theta = leaf(params)
        hv = hessian_vector(loss_fn(theta), theta, v, create_graph=True)
        grad = grad_of(torch.dot(hv, v), theta).detach()
        if not bool(torch.isfinite(grad).all()):
            raise NumericError(f'trace penalty gradient is not finite for probe seed {probe_seed}', seed=probe_seed)
        total += grad
    return ParamVector(total / probes, params.layer_map)


def htr_penalty_gradient(params, registry, batch, selection, probes=1, seed=0, running=None, layer_weights=None):
    """
    Trace penalty gradient of the mean cross-entropy on ``batch``.

    Batch-norm layers use batch statistics, as in the training forward
    pass, without touching the running estimates.
    """
    function = registry.function(running=running, training=True, update_running=False)

    def loss_fn(theta):
        return cross_entropy(function(theta, batch.inputs), batch.labels)

    return trace_penalty_gradient(loss_fn, params, selection, probes, seed, layer_weights)
