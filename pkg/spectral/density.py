"""Stochastic Lanczos quadrature densities with Gaussian broadening."""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from hesslens.exceptions import ConfigurationError, NumericError

from .lanczos import lanczos, probe_seed, rescale_to_unit

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 80
DEFAULT_GRID_POINTS = 1024
DEFAULT_KAPPA = 3.0
DEFAULT_PROBES = 8


@dataclass(frozen=True)
class SpectralDensity:
    """
    Density sampled on a uniform grid of the operator's original axis.

    ``unit_grid`` is the [−1, 1] grid the broadening was evaluated on;
    ``grid = scale * unit_grid + shift`` and ``weights`` are divided by
    ``scale`` so the density keeps unit mass.
    """

    grid: np.ndarray
    weights: np.ndarray
    sigma: float
    scale: float
    shift: float
    num_probes: int
    degenerate: bool = False
    kind: str = ''
    scope: str = ''

    @property
    def unit_grid(self):
        return (self.grid - self.shift) / self.scale

    @property
    def spacing(self):
        return float(self.grid[1] - self.grid[0])

    def mass(self):
        return float(trapezoid(self.weights, self.grid))

    def moment(self, order=1):
        return float(trapezoid(self.weights * self.grid ** order, self.grid))

    @classmethod
    def from_arrays(cls, grid, weights, **extra):
        """Density from explicit grid samples, e.g. a histogram or a constructed test curve."""
        grid = np.asarray(grid, dtype=np.float64)
        extra.setdefault('sigma', 0.0)
        extra.setdefault('scale', 1.0)
        extra.setdefault('shift', 0.0)
        extra.setdefault('num_probes', 0)
        return cls(grid=grid, weights=np.asarray(weights, dtype=np.float64), **extra)

    def to_csv(self, path):
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['t', 'phi'])
            for t, phi in zip(self.grid, self.weights):
                writer.writerow([format(float(t), '.17g'), format(float(phi), '.17g')])
        return path

    def metadata(self):
        return {
            'kind': self.kind,
            'scope': self.scope,
            'sigma': self.sigma,
            'scale': self.scale,
            'shift': self.shift,
            'num_probes': self.num_probes,
            'grid_points': len(self.grid),
            'degenerate': self.degenerate,
            'mass': self.mass(),
        }


def broadening_width(steps, kappa):
    """σ = 2 / ((M − 1)·√(8 ln κ)) on the unit interval."""
    return 2.0 / ((max(steps, 2) - 1) * math.sqrt(8.0 * math.log(kappa)))


def gaussian_mixture(grid, centers, weights, sigma):
    offsets = grid[:, None] - centers[None, :]
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    return kernel @ weights


def slq_density(op, M=DEFAULT_STEPS, K=DEFAULT_GRID_POINTS, kappa=DEFAULT_KAPPA, num_probes=DEFAULT_PROBES,
                seed=0, reorthogonalize=True, workers=1):
    """
    Probe-averaged Σ_i w_i g_σ(t − λ_i) of the rescaled operator.

    Probe p starts Lanczos from seed ``seed ^ p``. A failing probe is
    logged and skipped; if every probe fails the last error is raised.
    """
    if K < 2:
        raise ConfigurationError(f'density grid needs at least 2 points, got K={K}')
    if kappa <= 1:
        raise ConfigurationError(f'kappa must exceed 1, got {kappa}')
    if num_probes < 1:
        raise ConfigurationError(f'num_probes must be at least 1, got {num_probes}')

    rescaled, scale, shift, degenerate = rescale_to_unit(op, seed=seed)
    steps = min(M, op.dim)
    sigma = broadening_width(steps, kappa)
    unit_grid = np.linspace(-1.0, 1.0, K)

    def run(probe):
        try:
            factor = lanczos(rescaled, steps, probe_seed(seed, probe), reorthogonalize=reorthogonalize)
        except NumericError as exc:
            logger.warning('SLQ probe %d skipped: %s', probe, exc)
            return exc
        logger.debug('SLQ probe %d: order %d, weight sum %.12f', probe, factor.order, factor.ritz_weights.sum())
        return gaussian_mixture(unit_grid, factor.ritz_values, factor.ritz_weights, sigma)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(num_probes)))
    else:
        outcomes = [run(p) for p in range(num_probes)]
    curves = [c for c in outcomes if not isinstance(c, Exception)]
    if not curves:
        raise outcomes[-1]

    phi = np.mean(np.stack(curves), axis=0)
    return SpectralDensity(
        grid=scale * unit_grid + shift,
        weights=phi / scale,
        sigma=sigma,
        scale=scale,
        shift=shift,
        num_probes=len(curves),
        degenerate=degenerate,
        kind=getattr(op, 'kind', '') or '',
        scope=getattr(op, 'scope', ''),
    )
