"""
Reverse-mode derivatives of small-network losses, including second order.

Every routine builds its own autograd tape from a detached copy of the
parameter snapshot, so snapshots can be shared read-only between callers.
"""
from dataclasses import dataclass

import torch

from hesslens.exceptions import ConfigurationError, DimensionError

from .params import DTYPE, ParamVector


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy, fused through log-sum-exp."""
    picked = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return (torch.logsumexp(logits, dim=1) - picked).mean()


def grad_of(output, theta, grad_outputs=None, create_graph=False):
    """``torch.autograd.grad`` that answers zeros where ``output`` ignores ``theta``."""
    if not output.requires_grad:
        return torch.zeros_like(theta)
    (grad,) = torch.autograd.grad(
        output, theta, grad_outputs=grad_outputs, create_graph=create_graph, allow_unused=True
    )
    return torch.zeros_like(theta) if grad is None else grad


def leaf(model_state):
    values = model_state.values if isinstance(model_state, ParamVector) else model_state
    return values.detach().clone().to(DTYPE).requires_grad_(True)


@dataclass
class LossTape:
    loss: torch.Tensor
    logits: torch.Tensor
    theta: torch.Tensor
    layer_map: tuple

    def value(self):
        return float(self.loss.detach())


def forward_loss(forward_fn, model_state, batch):
    """Mean cross-entropy of ``forward_fn`` over ``batch`` with a reusable tape."""
    if len(batch.labels) == 0:
        raise ConfigurationError('cannot evaluate the loss of an empty batch')
    theta = leaf(model_state)
    logits = forward_fn(theta, batch.inputs)
    _check_logits(logits, batch.labels)
    loss = cross_entropy(logits, batch.labels)
    return LossTape(loss=loss, logits=logits, theta=theta, layer_map=model_state.layer_map)


def gradient(loss_tape, create_graph=False):
    grad = grad_of(loss_tape.loss, loss_tape.theta, create_graph=create_graph)
    if not create_graph:
        grad = grad.detach()
    return ParamVector(grad, loss_tape.layer_map)


def hessian_vector(loss, theta, v, create_graph=False):
    """Pearlmutter product: differentiate ⟨∇loss, v⟩ a second time."""
    grad = grad_of(loss, theta, create_graph=True)
    return grad_of(torch.dot(grad, v), theta, create_graph=create_graph)


def hvp(forward_fn, model_state, batch, v):
    v = _direction(v, model_state.dim)
    tape = forward_loss(forward_fn, model_state, batch)
    product = hessian_vector(tape.loss, tape.theta, v)
    return ParamVector(product.detach(), model_state.layer_map)


def jvp_outputs(forward_fn, model_state, sample, v):
    """
    Directional derivative (∂f/∂θ)·v of the pre-softmax outputs.

    Computed with the double-reverse trick: the vector-Jacobian product
    Jᵀu is linear in a dummy cotangent u, so differentiating it with
    respect to u along v gives Jv exactly.
    """
    v = _direction(v, model_state.dim)
    inputs, single = _as_batch(forward_fn, sample)
    theta = leaf(model_state)
    outputs = forward_fn(theta, inputs)
    cotangent = torch.zeros_like(outputs, requires_grad=True)
    pulled = grad_of(outputs, theta, grad_outputs=cotangent, create_graph=True)
    if pulled.requires_grad:
        (pushed,) = torch.autograd.grad(pulled, cotangent, grad_outputs=v, allow_unused=True)
    else:
        pushed = None
    if pushed is None:
        pushed = torch.zeros_like(outputs)
    pushed = pushed.detach()
    return pushed[0] if single else pushed


def vjp_outputs(forward_fn, model_state, sample, u):
    """Reverse-mode product (∂f/∂θ)ᵀ·u returned as a ParamVector."""
    inputs, single = _as_batch(forward_fn, sample)
    theta = leaf(model_state)
    outputs = forward_fn(theta, inputs)
    u = torch.as_tensor(u, dtype=DTYPE)
    if single:
        u = u.reshape(1, -1)
    if u.shape != outputs.shape:
        raise DimensionError(f'cotangent shape {tuple(u.shape)} does not match outputs {tuple(outputs.shape)}')
    pulled = grad_of(outputs, theta, grad_outputs=u)
    return ParamVector(pulled.detach(), model_state.layer_map)


def _direction(v, dim):
    values = v.values if isinstance(v, ParamVector) else torch.as_tensor(v, dtype=DTYPE)
    if values.numel() != dim:
        raise DimensionError(f'direction has dimension {values.numel()}, parameters have {dim}')
    return values.reshape(-1).detach().to(DTYPE)


def _as_batch(forward_fn, sample):
    inputs = getattr(sample, 'inputs', sample)
    inputs = torch.as_tensor(inputs, dtype=DTYPE)
    input_shape = getattr(forward_fn, 'input_shape', None)
    if input_shape is not None and tuple(inputs.shape) == tuple(input_shape):
        return inputs.unsqueeze(0), True
    return inputs, False


def _check_logits(logits, labels):
    if logits.dim() != 2 or logits.shape[0] != labels.shape[0]:
        raise ConfigurationError(
            f'model produced outputs of shape {tuple(logits.shape)} for {labels.shape[0]} labels'
        )
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ConfigurationError(f'labels must lie in [0, {logits.shape[1]})')
