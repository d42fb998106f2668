"""Hutchinson trace estimation."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import torch

from adcore.params import DTYPE
from hesslens.exceptions import ConfigurationError, NumericError

from .lanczos import probe_seed

logger = logging.getLogger(__name__)

DISTRIBUTIONS = ('gaussian', 'rademacher')
DEFAULT_PROBES = 100


@dataclass(frozen=True)
class TraceEstimate:
    mean: float
    stderr: float
    n: int
    distribution: str
    seed: int

    def to_dict(self):
        return asdict(self)


def probe_vector(dim, distribution, seed):
    generator = torch.Generator().manual_seed(int(seed))
    if distribution == 'gaussian':
        return torch.randn(dim, dtype=DTYPE, generator=generator)
    if distribution == 'rademacher':
        return torch.randint(0, 2, (dim,), generator=generator).to(DTYPE) * 2.0 - 1.0
    raise ConfigurationError(f'unknown probe distribution {distribution!r}; expected one of {DISTRIBUTIONS}')


def quadratic_form(op, distribution, seed):
    v = probe_vector(op.dim, distribution, seed)
    value = float(v @ op.apply(v))
    if not math.isfinite(value):
        raise NumericError(f'Hutchinson probe with seed {seed} produced {value}', seed=seed)
    return value


def hutchinson_trace(op, n=DEFAULT_PROBES, distribution='gaussian', seed=0, workers=1):
    """
    Mean of vᵀ·op(v) over ``n`` probes with standard error stdev/√n.

    Probe p draws from seed ``seed ^ p``; n = 1 reports a standard error of 0.
    """
    if n < 1:
        raise ConfigurationError(f'Hutchinson needs at least one probe, got n={n}')
    if distribution not in DISTRIBUTIONS:
        raise ConfigurationError(f'unknown probe distribution {distribution!r}; expected one of {DISTRIBUTIONS}')
    seeds = [probe_seed(seed, p) for p in range(n)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(lambda s: quadratic_form(op, distribution, s), seeds))
    else:
        values = [quadratic_form(op, distribution, s) for s in seeds]
    values = np.asarray(values)
    mean = float(np.sum(values) / n)
    stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    logger.debug('Hutchinson %s n=%d: %.6g ± %.3g', distribution, n, mean, stderr)
    return TraceEstimate(mean=mean, stderr=stderr, n=n, distribution=distribution, seed=int(seed))
