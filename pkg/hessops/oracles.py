"""Dense reference computations for tiny models, independent of the operator code paths."""
import torch

from adcore.autodiff import cross_entropy, forward_loss, gradient, leaf
from adcore.finitediff import gradient_difference_hessian

from .curvature import logit_curvature


def output_jacobian(function, params, sample):
    """(C, D) Jacobian of one sample's logits, one reverse pass per output."""
    theta = leaf(params)
    logits = function(theta, sample.unsqueeze(0))[0]
    rows = [torch.autograd.grad(logits[c], theta, retain_graph=True)[0] for c in range(logits.numel())]
    return torch.stack(rows)


def explicit_gauss_newton(params, registry, probe_set, layer=None, running=None):
    """Ave_i J_iᵀ B_i J_i assembled from explicit per-sample Jacobians."""
    function = registry.function(running=running, training=False)
    with torch.no_grad():
        curvature = logit_curvature(function(params.values, probe_set.inputs))
    total = torch.zeros(params.dim, params.dim, dtype=params.values.dtype)
    for i in range(len(probe_set)):
        jacobian = output_jacobian(function, params, probe_set.inputs[i])
        total += jacobian.T @ curvature.hessian[i] @ jacobian
    dense = total / len(probe_set)
    if layer is not None:
        segment = params.segment(layer).slice
        dense = dense[segment, segment]
    return dense


def finite_difference_hessian(params, registry, probe_set, layer=None, running=None, eps=1e-4):
    """Dense Hessian from central differences of exact gradients."""
    function = registry.function(running=running, training=False)

    def grad_fn(values):
        return gradient(forward_loss(function, registry.wrap(values), probe_set)).values

    dense = gradient_difference_hessian(grad_fn, params.values, eps=eps)
    if layer is not None:
        segment = params.segment(layer).slice
        dense = dense[segment, segment]
    return dense


def autograd_hessian(params, registry, probe_set, running=None):
    """Dense Hessian from ``torch.autograd.functional.hessian`` of the probe-set loss."""
    function = registry.function(running=running, training=False)

    def loss(values):
        return cross_entropy(function(values, probe_set.inputs), probe_set.labels)

    return torch.autograd.functional.hessian(loss, params.values.detach().clone())
