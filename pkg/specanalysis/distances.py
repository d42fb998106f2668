"""Distances between spectral densities on a shared grid."""
import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import rel_entr

from hesslens.exceptions import ConfigurationError
from nnmodels.networks import middle_band

logger = logging.getLogger(__name__)

DEFAULT_GRID_POINTS = 2048


def common_grid(p, q, grid_points=DEFAULT_GRID_POINTS):
    """Uniform grid over the union of both supports."""
    low = min(float(p.grid[0]), float(q.grid[0]))
    high = max(float(p.grid[-1]), float(q.grid[-1]))
    if not high > low:
        raise ConfigurationError(f'densities span an empty interval [{low}, {high}]')
    return np.linspace(low, high, grid_points)


def resample(density, grid):
    return np.interp(grid, density.grid, density.weights, left=0.0, right=0.0)


def unit_mass(values, grid):
    mass = float(trapezoid(values, grid))
    if not np.isfinite(mass) or mass <= 0:
        raise ConfigurationError(f'cannot normalize a density with mass {mass}')
    return values / mass


def wasserstein1(p, q, grid_points=DEFAULT_GRID_POINTS, normalize_width=False):
    """
    ∫ |P(t) − Q(t)| dt between unit-mass versions of two densities.

    P and Q are trapezoidal cumulative integrals on the common grid. With
    ``normalize_width`` the distance is divided by the grid width, giving a
    dimensionless value in [0, 1].
    """
    grid = common_grid(p, q, grid_points)
    cdf_p = cumulative_trapezoid(unit_mass(resample(p, grid), grid), grid, initial=0.0)
    cdf_q = cumulative_trapezoid(unit_mass(resample(q, grid), grid), grid, initial=0.0)
    distance = float(trapezoid(np.abs(cdf_p - cdf_q), grid))
    if normalize_width:
        distance /= float(grid[-1] - grid[0])
    return distance


def js_divergence(p, q, grid_points=DEFAULT_GRID_POINTS):
    """½KL(p‖m) + ½KL(q‖m) with m = (p + q)/2, in nats, over grid bins."""
    grid = common_grid(p, q, grid_points)
    bins_p = _probabilities(resample(p, grid))
    bins_q = _probabilities(resample(q, grid))
    mixture = 0.5 * (bins_p + bins_q)
    return float(0.5 * np.sum(rel_entr(bins_p, mixture)) + 0.5 * np.sum(rel_entr(bins_q, mixture)))


def _probabilities(values):
    values = np.clip(values, 0.0, None)
    total = float(np.sum(values))
    if not np.isfinite(total) or total <= 0:
        raise ConfigurationError('cannot compare a zero-mass density')
    return values / total


@dataclass(frozen=True)
class DistanceRow:
    layer: int
    name: str
    wasserstein: float
    js: float


@dataclass(frozen=True)
class DistanceTable:
    rows: tuple
    grid_points: int
    normalize_width: bool
    normalization: dict = field(default_factory=dict)

    @property
    def argmin_wasserstein(self):
        return min(self.rows, key=lambda row: row.wasserstein).layer

    @property
    def argmin_js(self):
        return min(self.rows, key=lambda row: row.js).layer

    def argmin_in_middle(self, num_layers=None):
        return self.argmin_wasserstein in middle_band(num_layers or len(self.rows))

    def to_csv(self, path, metrics=('wasserstein', 'js')):
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['layer', 'name', *metrics])
            for row in self.rows:
                writer.writerow([row.layer, row.name] + [format(getattr(row, m), '.17g') for m in metrics])
        return path

    def to_dict(self):
        return {
            'rows': [asdict(row) for row in self.rows],
            'argmin_wasserstein': self.argmin_wasserstein,
            'argmin_js': self.argmin_js,
            'grid_points': self.grid_points,
            'normalization': self.normalization,
        }


def layer_distance_table(layer_densities, full, names=None, grid_points=DEFAULT_GRID_POINTS, normalize_width=True):
    """Wasserstein and JS distance of every layer density to the full-network density."""
    if not layer_densities:
        raise ConfigurationError('distance table needs at least one layer density')
    names = names or [f'layer{l}' for l in range(len(layer_densities))]
    rows = []
    for layer, (name, density) in enumerate(zip(names, layer_densities)):
        row = DistanceRow(
            layer=layer,
            name=name,
            wasserstein=wasserstein1(density, full, grid_points, normalize_width=normalize_width),
            js=js_divergence(density, full, grid_points),
        )
        logger.debug('layer %d (%s): W1=%.6g JS=%.6g', layer, name, row.wasserstein, row.js)
        rows.append(row)
    normalization = {
        'mass': 'each density renormalized to unit mass on the common grid',
        'wasserstein': 'divided by the common grid width' if normalize_width else 'unit-mass distance',
        'js': 'natural log over grid bins',
    }
    return DistanceTable(tuple(rows), grid_points, normalize_width, normalization)
