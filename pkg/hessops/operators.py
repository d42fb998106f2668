"""
Matrix-free symmetric curvature operators.

Every operator binds a parameter snapshot and a probe set when it is built
and never sees live training state afterwards. ``apply`` builds a fresh
autograd tape on each call, so one operator can serve concurrent callers.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import torch

from adcore.autodiff import hvp, jvp_outputs, vjp_outputs
from adcore.params import DTYPE, ParamVector
from hesslens.exceptions import ConfigurationError, DenseLimitError, DimensionError

from .curvature import logit_curvature

logger = logging.getLogger(__name__)

DEFAULT_DENSE_LIMIT = 5000


class CurvatureOperator(ABC):
    kind = None

    def __init__(self, dim, layer=None):
        self.dim = int(dim)
        self.layer = layer

    def apply(self, v):
        v = v.values if isinstance(v, ParamVector) else v
        v = torch.as_tensor(v, dtype=DTYPE).reshape(-1)
        if v.numel() != self.dim:
            raise DimensionError(f'{self.kind} operator has dimension {self.dim}, got a vector of {v.numel()}')
        return self._apply(v)

    __call__ = apply

    @abstractmethod
    def _apply(self, v):
        pass

    @property
    def scope(self):
        return 'full' if self.layer is None else f'layer{self.layer}'

    def __repr__(self):
        return f'{type(self).__name__}(kind={self.kind!r}, dim={self.dim}, layer={self.layer})'


class DenseOperator(CurvatureOperator):
    kind = 'dense'

    def __init__(self, matrix):
        matrix = torch.as_tensor(matrix, dtype=DTYPE)
        if matrix.dim() != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionError(f'dense operator needs a square matrix, got {tuple(matrix.shape)}')
        super().__init__(matrix.shape[0])
        self.matrix = matrix

    @classmethod
    def identity(cls, dim):
        return cls(torch.eye(dim, dtype=DTYPE))

    @classmethod
    def diagonal(cls, values):
        return cls(torch.diag(torch.as_tensor(values, dtype=DTYPE)))

    def _apply(self, v):
        return self.matrix @ v


class RescaledOperator(CurvatureOperator):
    """(A − shift·I) / scale."""

    kind = 'rescaled'

    def __init__(self, base, scale, shift):
        super().__init__(base.dim, base.layer)
        self.base = base
        self.scale = float(scale)
        self.shift = float(shift)

    def _apply(self, v):
        return (self.base.apply(v) - self.shift * v) / self.scale


class _ModelOperator(CurvatureOperator):
    """Shared binding of a parameter snapshot, eval-mode model function and probe set."""

    def __init__(self, params, registry, probe_set, running=None, layer=None):
        if len(probe_set) == 0:
            raise ConfigurationError('curvature operators need a nonempty probe set')
        self.params = params.snapshot()
        if layer is not None:
            self.params.segment(layer)
        self.registry = registry
        self.probe_set = probe_set
        self.function = registry.function(running=running, training=False)
        dim = self.params.dim if layer is None else self.params.segment(layer).length
        super().__init__(dim, layer)

    def _embed(self, v):
        return v if self.layer is None else self.params.embed(self.layer, v)

    def _extract(self, full):
        return full if self.layer is None else full[self.params.segment(self.layer).slice]


class HessianOperator(_ModelOperator):
    """Mean cross-entropy Hessian over the probe set, or one diagonal block of it."""

    @property
    def kind(self):
        return 'hessian' if self.layer is None else 'layer-hessian'

    def _apply(self, v):
        product = hvp(self.function, self.params, self.probe_set, self._embed(v))
        return self._extract(product.values)


class GaussNewtonOperator(_ModelOperator):
    """G = Ave_i J_iᵀ B_i J_i with J_i the logit Jacobian of sample i."""

    def __init__(self, params, registry, probe_set, running=None, layer=None):
        super().__init__(params, registry, probe_set, running=running, layer=layer)
        with torch.no_grad():
            logits = self.function(self.params.values, probe_set.inputs)
        self.curvature = logit_curvature(logits)

    @property
    def kind(self):
        return 'gauss-newton' if self.layer is None else 'layer-gauss-newton'

    def _apply(self, v):
        inputs = self.probe_set.inputs
        pushed = jvp_outputs(self.function, self.params, inputs, self._embed(v))
        weighted = self.curvature.apply(pushed) / len(self.probe_set)
        pulled = vjp_outputs(self.function, self.params, inputs, weighted)
        return self._extract(pulled.values)


class ResidualOperator(CurvatureOperator):
    """H = Hess − G."""

    kind = 'h-residual'

    def __init__(self, hessian, gauss_newton):
        if hessian.dim != gauss_newton.dim or hessian.layer != gauss_newton.layer:
            raise DimensionError(
                f'cannot subtract {gauss_newton!r} from {hessian!r}: dimensions or layers differ'
            )
        if getattr(hessian, 'probe_set', None) is not getattr(gauss_newton, 'probe_set', None):
            raise ConfigurationError('Hessian and Gauss-Newton operators must share one probe set')
        super().__init__(hessian.dim, hessian.layer)
        self.hessian = hessian
        self.gauss_newton = gauss_newton

    def _apply(self, v):
        return self.hessian.apply(v) - self.gauss_newton.apply(v)


def hessian_op(params, registry, probe_set, running=None):
    return HessianOperator(params, registry, probe_set, running=running)


def layer_hessian_op(params, registry, layer, probe_set, running=None):
    return HessianOperator(params, registry, probe_set, running=running, layer=layer)


def gauss_newton_op(params, registry, probe_set, layer=None, running=None):
    return GaussNewtonOperator(params, registry, probe_set, running=running, layer=layer)


def h_residual_op(hessian, gauss_newton):
    return ResidualOperator(hessian, gauss_newton)


OPERATOR_CHOICES = ('hessian', 'g', 'h')


def build_operator(name, params, registry, probe_set, layer=None, running=None):
    """Operator by short name: ``hessian``, ``g`` (Gauss-Newton) or ``h`` (residual)."""
    if name == 'hessian':
        return HessianOperator(params, registry, probe_set, running=running, layer=layer)
    if name == 'g':
        return GaussNewtonOperator(params, registry, probe_set, running=running, layer=layer)
    if name == 'h':
        return ResidualOperator(
            HessianOperator(params, registry, probe_set, running=running, layer=layer),
            GaussNewtonOperator(params, registry, probe_set, running=running, layer=layer),
        )
    raise ConfigurationError(f'unknown operator {name!r}; expected one of {OPERATOR_CHOICES}')


@dataclass(frozen=True)
class DenseMatrix:
    matrix: torch.Tensor
    asymmetry: float

    def eigenvalues(self):
        return torch.linalg.eigvalsh(self.matrix)

    def block(self, segment):
        return self.matrix[segment.slice, segment.slice]


def materialize_dense(op, max_dim=DEFAULT_DENSE_LIMIT):
    """
    Columns op(e_j) stacked into a matrix and symmetrized as (A + Aᵀ)/2.

    ``asymmetry`` is ‖A − Aᵀ‖_F / ‖A‖_F of the raw columns (0 for a zero matrix).
    """
    if op.dim > max_dim:
        raise DenseLimitError(op.dim, max_dim)
    columns = []
    for j in range(op.dim):
        unit = torch.zeros(op.dim, dtype=DTYPE)
        unit[j] = 1.0
        columns.append(op.apply(unit))
    raw = torch.stack(columns, dim=1)
    norm = float(torch.linalg.norm(raw))
    asymmetry = float(torch.linalg.norm(raw - raw.T)) / norm if norm > 0 else 0.0
    logger.debug('materialized %s as %dx%d, asymmetry %.3e', op.kind, op.dim, op.dim, asymmetry)
    return DenseMatrix(matrix=0.5 * (raw + raw.T), asymmetry=asymmetry)
