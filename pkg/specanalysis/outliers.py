"""Bulk/outlier separation of a spectral density."""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.signal import find_peaks

logger = logging.getLogger(__name__)

DEFAULT_BULK_MASS = 0.99
DEFAULT_PROMINENCE = 1e-3
DEFAULT_MODE_FRACTION = 0.1


@dataclass(frozen=True)
class OutlierReport:
    bulk_edge: float
    locations: tuple
    count: int
    expected_classes: int = None

    @property
    def matches_expected(self):
        if self.expected_classes is None:
            return None
        return abs(self.count - self.expected_classes) <= 1

    def to_dict(self):
        data = asdict(self)
        data['locations'] = list(self.locations)
        data['matches_expected'] = self.matches_expected
        return data


def left_mode(weights, mode_fraction=DEFAULT_MODE_FRACTION):
    """Index of the leftmost local maximum at least ``mode_fraction`` as high as the peak density."""
    weights = np.asarray(weights)
    floor = float(weights.min()) - 1.0
    # padding lets a maximum on either end of the grid count as a peak
    peaks, _ = find_peaks(np.concatenate(([floor], weights, [floor])))
    significant = [p - 1 for p in peaks if weights[p - 1] >= mode_fraction * float(weights.max())]
    return significant[0] if significant else int(np.argmax(weights))


def bulk_edge_index(weights, grid, bulk_mass=DEFAULT_BULK_MASS, prominence=DEFAULT_PROMINENCE,
                    mode_fraction=DEFAULT_MODE_FRACTION):
    """
    Grid index of the right edge of the bulk.

    The bulk grows rightward from the left mode. It takes in ``bulk_mass``
    of the total mass and then keeps going while the density stays above
    ``prominence`` times the left-mode height; the edge is the last point
    of that contiguous run.
    """
    mode = left_mode(weights, mode_fraction)
    cdf = cumulative_trapezoid(weights, grid, initial=0.0)
    if cdf[-1] <= 0:
        return mode
    start = min(max(mode, int(np.searchsorted(cdf / cdf[-1], bulk_mass))), len(weights) - 1)
    floor = prominence * float(weights[mode])
    if weights[start] <= floor:
        return start
    gap = np.nonzero(weights[start:] <= floor)[0]
    return start + int(gap[0]) - 1 if gap.size else len(weights) - 1


def count_outliers(density, expected_classes=None, bulk_mass=DEFAULT_BULK_MASS, prominence=DEFAULT_PROMINENCE,
                   mode_fraction=DEFAULT_MODE_FRACTION):
    """
    Local maxima beyond the bulk edge.

    A maximum counts when its prominence reaches ``prominence`` times the
    highest density beyond the edge.
    """
    weights, grid = np.asarray(density.weights), np.asarray(density.grid)
    cut = bulk_edge_index(weights, grid, bulk_mass, prominence, mode_fraction)
    beyond = weights[cut + 1:]
    locations = ()
    if beyond.size > 2 and beyond.max() > 0:
        peaks, _ = find_peaks(beyond, prominence=prominence * float(beyond.max()))
        locations = tuple(float(grid[cut + 1 + i]) for i in peaks)
    report = OutlierReport(
        bulk_edge=float(grid[cut]), locations=locations, count=len(locations), expected_classes=expected_classes,
    )
    logger.info('bulk edge %.6g, %d outliers', report.bulk_edge, report.count)
    if report.matches_expected is False:
        logger.warning('found %d outliers, expected about %d', report.count, expected_classes)
    return report
