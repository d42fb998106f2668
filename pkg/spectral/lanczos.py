"""Lanczos tridiagonalization of matrix-free symmetric operators."""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from scipy.linalg import eigh_tridiagonal

from adcore.params import DTYPE
from hesslens.exceptions import ConfigurationError, NumericError
from hessops.operators import RescaledOperator

logger = logging.getLogger(__name__)

BREAKDOWN_TOL = 1e-10
EXTREME_STEPS = 32
MARGIN = 1.05


@dataclass(frozen=True)
class TridiagonalFactor:
    alphas: np.ndarray
    betas: np.ndarray
    ritz_values: np.ndarray
    ritz_weights: np.ndarray
    seed: int
    requested: int

    @property
    def order(self):
        return len(self.alphas)

    @property
    def broke_down(self):
        return self.order < self.requested

    def matrix(self):
        return np.diag(self.alphas) + np.diag(self.betas, 1) + np.diag(self.betas, -1)


def probe_seed(seed, probe):
    return int(seed) ^ int(probe)


def start_vector(dim, seed):
    generator = torch.Generator().manual_seed(int(seed))
    v = torch.randn(dim, dtype=DTYPE, generator=generator)
    return v / torch.linalg.norm(v)


def lanczos(op, M, seed, reorthogonalize=True):
    """
    M steps of the symmetric Lanczos recurrence from a seeded Gaussian start.

    With ``reorthogonalize`` each new residual is projected off every stored
    Lanczos vector. A residual norm below 1e-10 means an invariant subspace
    was found; the factor of that reduced order is returned.
    """
    if M < 1:
        raise ConfigurationError(f'Lanczos needs at least one step, got M={M}')
    if M > op.dim:
        raise ConfigurationError(f'Lanczos steps M={M} exceed the operator dimension {op.dim}')

    basis = [start_vector(op.dim, seed)]
    alphas, betas = [], []
    previous, beta = torch.zeros(op.dim, dtype=DTYPE), 0.0
    for step in range(M):
        current = basis[-1]
        w = op.apply(current) - beta * previous
        alpha = float(w @ current)
        w = w - alpha * current
        if reorthogonalize:
            stacked = torch.stack(basis, dim=1)
            for _ in range(2):
                w = w - stacked @ (stacked.T @ w)
        beta = float(torch.linalg.norm(w))
        if not (math.isfinite(alpha) and math.isfinite(beta)):
            raise NumericError(f'Lanczos produced a non-finite coefficient at step {step}', seed=seed)
        alphas.append(alpha)
        if step == M - 1:
            break
        if beta < BREAKDOWN_TOL:
            logger.warning('Lanczos breakdown at step %d of %d (beta=%.2e); returning reduced factor', step + 1, M, beta)
            break
        betas.append(beta)
        previous = current
        basis.append(w / beta)

    alphas, betas = np.asarray(alphas), np.asarray(betas)
    if len(alphas) == 1:
        values, weights = alphas.copy(), np.ones(1)
    else:
        values, vectors = eigh_tridiagonal(alphas, betas)
        weights = vectors[0, :] ** 2
    return TridiagonalFactor(alphas, betas, values, weights, seed=int(seed), requested=M)


def extreme_eigenvalues(op, M=EXTREME_STEPS, seed=0):
    """(λ_min, λ_max) as the extreme Ritz values of one reorthogonalized run."""
    factor = lanczos(op, min(M, op.dim), seed, reorthogonalize=True)
    return float(factor.ritz_values.min()), float(factor.ritz_values.max())


def lambda_max(op, M=EXTREME_STEPS, seed=0, magnitude=False):
    """Largest algebraic Ritz value, or the largest magnitude with ``magnitude=True``."""
    factor = lanczos(op, min(M, op.dim), seed, reorthogonalize=True)
    if magnitude:
        return float(np.abs(factor.ritz_values).max())
    return float(factor.ritz_values.max())


class Rescaling(NamedTuple):
    operator: RescaledOperator
    scale: float
    shift: float
    degenerate: bool


def rescale_to_unit(op, seed=0, M=EXTREME_STEPS):
    """
    Map the spectrum of ``op`` into [−1, 1] as (op − b·I)/a.

    a = (λ_max − λ_min)·1.05/2 and b = (λ_max + λ_min)/2 from the extreme
    Ritz values. A zero-width spectrum is flagged degenerate with a = 1.
    """
    low, high = extreme_eigenvalues(op, M, seed)
    shift = 0.5 * (high + low)
    scale = 0.5 * (high - low) * MARGIN
    degenerate = scale <= 1e-12 * max(1.0, abs(shift))
    if degenerate:
        logger.warning('operator spectrum has zero width around %.6g; using unit scale', shift)
        scale = 1.0
    return Rescaling(RescaledOperator(op, scale, shift), scale, shift, degenerate)
