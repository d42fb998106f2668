"""SGD with classical momentum and L2 weight decay."""
import torch

from adcore.params import DTYPE, ParamVector
from hesslens.exceptions import DimensionError, NumericError


def sgd_step(params, grads, momentum_buffers, config, step=None):
    """
    buf ← μ·buf + (grad + l2·θ);  θ ← θ − lr·buf.

    Returns ``(updated params, updated buffers)``; inputs are left untouched.
    """
    grads = grads.values if isinstance(grads, ParamVector) else torch.as_tensor(grads, dtype=DTYPE)
    buffers = torch.as_tensor(momentum_buffers, dtype=DTYPE)
    if grads.shape != params.values.shape or buffers.shape != params.values.shape:
        raise DimensionError(
            f'gradient {tuple(grads.shape)} and buffer {tuple(buffers.shape)} must match parameters {params.dim}'
        )
    if not bool(torch.isfinite(grads).all()):
        raise NumericError(f'non-finite gradient at step {step}', step=step)
    buffers = config.momentum * buffers + (grads + config.l2 * params.values)
    return params.with_values(params.values - config.lr * buffers), buffers
