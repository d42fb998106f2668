"""Central finite differences, used only as oracles for the exact routines."""
import torch

from .params import DTYPE


def central_gradient(loss_fn, values, eps=1e-5):
    values = torch.as_tensor(values, dtype=DTYPE)
    grad = torch.empty_like(values)
    with torch.no_grad():
        for j in range(values.numel()):
            step = torch.zeros_like(values)
            step[j] = eps
            grad[j] = (loss_fn(values + step) - loss_fn(values - step)) / (2 * eps)
    return grad


def directional_gradient_difference(grad_fn, values, v, eps=1e-4):
    """(g(θ+εv) − g(θ−εv)) / 2ε, the finite-difference stand-in for Hess·v."""
    values = torch.as_tensor(values, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    return (grad_fn(values + eps * v) - grad_fn(values - eps * v)) / (2 * eps)


def gradient_difference_hessian(grad_fn, values, eps=1e-4):
    values = torch.as_tensor(values, dtype=DTYPE)
    dim = values.numel()
    columns = []
    for j in range(dim):
        unit = torch.zeros(dim, dtype=DTYPE)
        unit[j] = 1.0
        columns.append(directional_gradient_difference(grad_fn, values, unit, eps))
    dense = torch.stack(columns, dim=1)
    return 0.5 * (dense + dense.T)


def output_difference(forward_fn, values, inputs, v, eps=1e-4):
    values = torch.as_tensor(values, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    with torch.no_grad():
        return (forward_fn(values + eps * v, inputs) - forward_fn(values - eps * v, inputs)) / (2 * eps)
