import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase, tag
from scipy.stats import wasserstein_distance

from adcore.params import DTYPE
from dataio.datasets import Batch, make_blobs, probe_set
from hesslens.exceptions import ConfigurationError
from hessops.operators import DenseOperator, hessian_op, layer_hessian_op
from hessops.oracles import explicit_gauss_newton
from htrtrain.config import TrainConfig
from htrtrain.loop import train
from nnmodels.networks import build
from nnmodels.specs import ModelSpec
from specanalysis.deltas import DeltaSet, cluster_purity, extract_deltas
from specanalysis.distances import js_divergence, layer_distance_table, wasserstein1
from specanalysis.outliers import count_outliers, left_mode
from spectral.density import SpectralDensity, slq_density


def gaussian(grid, center, sigma, mass=1.0):
    return mass * np.exp(-0.5 * ((grid - center) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))


def gaussian_density(center, sigma, low, high, points=2001):
    grid = np.linspace(low, high, points)
    return SpectralDensity.from_arrays(grid, gaussian(grid, center, sigma))


class WassersteinTest(SimpleTestCase):
    def setUp(self):
        self.p = gaussian_density(0.0, 1.0, -6.0, 6.0, points=12001)
        self.q = gaussian_density(1.5, 0.7, -2.0, 5.0, points=7001)

    def test_identical(self):
        """Test that a density is at distance 0 from itself"""
        self.assertEqual(wasserstein1(self.p, self.p), 0.0)

    def test_point_masses(self):
        """Test that narrow bumps at 0 and 1 are one unit apart"""
        left = gaussian_density(0.0, 1e-3, -0.01, 0.01, points=401)
        right = gaussian_density(1.0, 1e-3, 0.99, 1.01, points=401)
        self.assertAlmostEqual(wasserstein1(left, right, grid_points=20001), 1.0, delta=1e-3)

    def test_matches_weighted_sample_oracle(self):
        """Test agreement with scipy's weighted empirical Wasserstein distance"""
        oracle = wasserstein_distance(self.p.grid, self.q.grid, self.p.weights, self.q.weights)
        self.assertAlmostEqual(wasserstein1(self.p, self.q, grid_points=20001), oracle, delta=1e-3)

    def test_symmetric(self):
        """Test that the distance is symmetric"""
        self.assertAlmostEqual(wasserstein1(self.p, self.q), wasserstein1(self.q, self.p), places=12)

    def test_translation(self):
        """Test that shifting both densities leaves the distance unchanged"""
        shift = 3.25
        moved_p = SpectralDensity.from_arrays(self.p.grid + shift, self.p.weights)
        moved_q = SpectralDensity.from_arrays(self.q.grid + shift, self.q.weights)
        self.assertAlmostEqual(wasserstein1(moved_p, moved_q), wasserstein1(self.p, self.q), delta=1e-6)

    def test_normalized_width(self):
        """Test that width normalization divides by the common grid span"""
        raw = wasserstein1(self.p, self.q)
        self.assertAlmostEqual(wasserstein1(self.p, self.q, normalize_width=True), raw / 12.0, places=12)

    def test_zero_mass(self):
        """Test that a zero-mass density is rejected"""
        empty = SpectralDensity.from_arrays(self.p.grid, np.zeros_like(self.p.grid))
        with self.assertRaises(ConfigurationError):
            wasserstein1(empty, self.q)


class JensenShannonTest(SimpleTestCase):
    def test_identical(self):
        """Test that JS of a density with itself is 0"""
        p = gaussian_density(0.0, 1.0, -5.0, 5.0)
        self.assertEqual(js_divergence(p, p), 0.0)

    def test_disjoint(self):
        """Test that disjoint supports reach ln 2"""
        p = gaussian_density(0.5, 0.1, 0.0, 1.0)
        q = gaussian_density(2.5, 0.1, 2.0, 3.0)
        self.assertAlmostEqual(js_divergence(p, q), math.log(2), delta=1e-9)

    def test_direct_summation(self):
        """Test agreement with a direct summation on a shared grid"""
        rng = np.random.default_rng(4)
        grid = np.linspace(-1.0, 1.0, 2048)
        a, b = rng.random(2048), rng.random(2048)
        pa, pb = a / a.sum(), b / b.sum()
        mixture = 0.5 * (pa + pb)
        expected = 0.5 * np.sum(pa * np.log(pa / mixture)) + 0.5 * np.sum(pb * np.log(pb / mixture))
        result = js_divergence(SpectralDensity.from_arrays(grid, a), SpectralDensity.from_arrays(grid, b))
        self.assertAlmostEqual(result, float(expected), delta=1e-12)

    def test_bounds_and_symmetry(self):
        """Test that JS is symmetric and within [0, ln 2]"""
        p = gaussian_density(0.0, 1.0, -5.0, 5.0)
        q = gaussian_density(1.0, 0.5, -2.0, 4.0)
        value = js_divergence(p, q)
        self.assertEqual(value, js_divergence(q, p))
        self.assertTrue(0.0 < value <= math.log(2))


class OutlierTest(SimpleTestCase):
    def setUp(self):
        self.grid = np.linspace(-2.0, 10.0, 4000)
        weights = gaussian(self.grid, 0.0, 0.3, mass=0.994)
        for center in (5.0, 6.0, 7.0):
            weights = weights + gaussian(self.grid, center, 0.05, mass=0.002)
        self.spiked = SpectralDensity.from_arrays(self.grid, weights)

    def test_three_spikes(self):
        """Test that three isolated spikes beyond the bulk count as 3 outliers"""
        report = count_outliers(self.spiked, expected_classes=3)
        self.assertEqual(report.count, 3)
        self.assertEqual(len(report.locations), report.count)
        self.assertTrue(all(location > report.bulk_edge for location in report.locations))
        self.assertTrue(report.matches_expected)
        for location, center in zip(report.locations, (5.0, 6.0, 7.0)):
            self.assertAlmostEqual(location, center, delta=0.01)

    def test_single_gaussian(self):
        """Test that a lone Gaussian has no outliers and its bulk ends where it falls below 1e-3 of the mode"""
        report = count_outliers(SpectralDensity.from_arrays(self.grid, gaussian(self.grid, 0.0, 0.5)))
        self.assertEqual(report.count, 0)
        self.assertEqual(report.to_dict()['locations'], [])
        self.assertAlmostEqual(report.bulk_edge, 0.5 * math.sqrt(2 * math.log(1e3)), delta=0.005)

    def test_scale_invariance(self):
        """Test that stretching the axis keeps the count"""
        stretched = SpectralDensity.from_arrays(self.grid * 40.0, self.spiked.weights / 40.0)
        self.assertEqual(count_outliers(stretched).count, 3)

    def test_faint_outliers(self):
        """Test that outliers far below 1e-3 of the bulk peak are still counted"""
        weights = gaussian(self.grid, 0.0, 0.3, mass=1.0)
        for center in (4.0, 5.0, 6.0, 7.0, 8.0):
            weights = weights + gaussian(self.grid, center, 0.05, mass=1e-4)
        self.assertLess(weights[np.searchsorted(self.grid, 6.0)], 1e-3 * weights.max())
        report = count_outliers(SpectralDensity.from_arrays(self.grid, weights), expected_classes=5)
        self.assertEqual(report.count, 5)

    def test_bulk_shoulder_is_not_an_outlier(self):
        """Test that a local maximum inside the contiguous bulk is not counted"""
        weights = gaussian(self.grid, 0.0, 0.3, mass=0.9) + gaussian(self.grid, 0.8, 0.1, mass=0.1)
        weights = weights + gaussian(self.grid, 5.0, 0.05, mass=1e-3)
        report = count_outliers(SpectralDensity.from_arrays(self.grid, weights))
        self.assertGreater(report.bulk_edge, 0.8)
        self.assertEqual(report.count, 1)
        self.assertAlmostEqual(report.locations[0], 5.0, delta=0.01)

    def test_left_mode(self):
        """Test that the bulk starts at the leftmost maximum reaching a tenth of the peak"""
        weights = gaussian(self.grid, -1.0, 0.1, mass=0.15) + gaussian(self.grid, 0.0, 0.1, mass=0.85)
        self.assertAlmostEqual(float(self.grid[left_mode(weights)]), -1.0, delta=0.01)
        weights = gaussian(self.grid, -1.0, 0.1, mass=0.01) + gaussian(self.grid, 0.0, 0.1, mass=0.99)
        self.assertAlmostEqual(float(self.grid[left_mode(weights)]), 0.0, delta=0.01)

    def test_left_mode_on_grid_end(self):
        """Test that a density decreasing from the first grid point has its mode there"""
        self.assertEqual(left_mode(np.exp(-self.grid)), 0)


def planted_spectrum(num_classes, dim=2000, seed=0):
    """Diagonal operator with a skewed bulk in [−0.002, 0.048] and ``num_classes`` isolated eigenvalues."""
    bulk = 0.05 * np.random.default_rng(seed).random(dim - num_classes) ** 2 - 0.002
    return DenseOperator.diagonal(np.concatenate([bulk, np.linspace(0.4, 1.0, num_classes)]))


@tag('slow')
class OutlierCountSlqTest(SimpleTestCase):
    def passing_seeds(self, num_classes):
        passed = 0
        for seed in range(5):
            density = slq_density(planted_spectrum(num_classes, seed=seed), seed=seed)
            passed += bool(count_outliers(density, expected_classes=num_classes).matches_expected)
        return passed

    def test_three_classes(self):
        """Test that SLQ densities with 3 isolated eigenvalues among 2000 yield about 3 outliers"""
        self.assertGreaterEqual(self.passing_seeds(3), 3)

    def test_five_classes(self):
        """Test that SLQ densities with 5 isolated eigenvalues among 2000 yield about 5 outliers"""
        self.assertGreaterEqual(self.passing_seeds(5), 3)


class DeltaTest(SimpleTestCase):
    def setUp(self):
        self.params, self.registry = build(ModelSpec.mlp([4, 6, 5, 3]), seed=6)
        generator = torch.Generator().manual_seed(2)
        self.probe = Batch(
            torch.randn(8, 4, dtype=DTYPE, generator=generator), torch.tensor([i % 3 for i in range(8)])
        )

    def test_gram_reconstruction(self):
        """Test that the δ columns reconstruct the dense Gauss-Newton matrix"""
        deltas = extract_deltas(self.params, self.registry, self.probe, keep_columns=True)
        oracle = explicit_gauss_newton(self.params, self.registry, self.probe)
        self.assertLess(float((deltas.gram() - oracle).abs().max()), 1e-8)

    def test_layer_slice(self):
        """Test that layerwise δ vectors live in the layer's parameter space"""
        deltas = extract_deltas(self.params, self.registry, self.probe, layer=1, keep_columns=True)
        self.assertEqual(deltas.dim, self.params.segment(1).length)
        oracle = explicit_gauss_newton(self.params, self.registry, self.probe, layer=1)
        self.assertLess(float((deltas.gram() - oracle).abs().max()), 1e-8)

    def test_class_means(self):
        """Test that class means average the vectors of each label"""
        deltas = extract_deltas(self.params, self.registry, self.probe)
        for c in range(3):
            expected = deltas.vectors[deltas.labels == c].mean(dim=0)
            self.assertTrue(torch.allclose(deltas.class_means[c], expected, atol=1e-15))

    def test_saturated_sample(self):
        """Test that a saturated softmax yields vanishing δ vectors"""
        params, registry = build(ModelSpec.mlp([2, 3]), seed=0)
        values = torch.zeros(params.dim, dtype=DTYPE)
        values[0] = 60.0
        probe = Batch(torch.tensor([[1.0, 0.0]], dtype=DTYPE), torch.tensor([0]))
        deltas = extract_deltas(registry.wrap(values), registry, probe)
        self.assertLess(float(deltas.vectors.abs().max()), 1e-10)

    def test_csv_export(self):
        """Test that the CSV has a label column then the components"""
        deltas = extract_deltas(self.params, self.registry, self.probe)
        with tempfile.TemporaryDirectory() as tmp:
            path = deltas.to_csv(Path(tmp) / 'deltas.csv')
            lines = Path(path).read_text().splitlines()
        self.assertEqual(len(lines), 9)
        self.assertTrue(lines[0].startswith('label,d0,'))


class ClusterPurityTest(SimpleTestCase):
    def test_one_hot_vectors(self):
        """Test that one-hot class vectors are perfectly pure"""
        labels = torch.tensor([0, 1, 2, 0, 1, 2])
        deltas = DeltaSet.from_vectors(torch.eye(3, dtype=DTYPE)[labels], labels, 3)
        self.assertEqual(cluster_purity(deltas), 1.0)

    def test_shuffled_labels(self):
        """Test that shuffled labels drop purity to chance"""
        rng = np.random.default_rng(0)
        truth = rng.integers(0, 3, size=3000)
        shuffled = rng.permutation(truth)
        deltas = DeltaSet.from_vectors(np.eye(3)[truth], shuffled, 3)
        self.assertAlmostEqual(cluster_purity(deltas), 1.0 / 3, delta=0.05)

    def test_hand_computed_assignment(self):
        """Test a small set whose cosine assignment is worked out by hand"""
        vectors = [[1.0, 0.1], [0.9, 0.0], [0.0, 1.0], [0.1, 0.8], [0.8, 0.2]]
        deltas = DeltaSet.from_vectors(vectors, [0, 0, 1, 1, 1], 2)
        self.assertAlmostEqual(cluster_purity(deltas), 0.8, places=12)

    def test_degenerate_vectors(self):
        """Test that all-zero vectors report 1/C with a warning"""
        deltas = DeltaSet.from_vectors(torch.zeros(4, 5, dtype=DTYPE), [0, 1, 2, 3], 4)
        with self.assertLogs('specanalysis.deltas', level='WARNING'):
            self.assertEqual(cluster_purity(deltas), 0.25)

    def test_single_class(self):
        """Test that purity needs two classes"""
        deltas = DeltaSet.from_vectors(torch.ones(3, 2, dtype=DTYPE), [1, 1, 1], 2)
        with self.assertRaises(ConfigurationError):
            cluster_purity(deltas)


class DistanceTableTest(SimpleTestCase):
    def setUp(self):
        self.full = gaussian_density(1.0, 0.5, -2.0, 4.0)
        self.layers = [
            gaussian_density(0.0, 0.3, -1.5, 1.5),
            gaussian_density(1.2, 0.6, -2.0, 4.0),
            gaussian_density(3.0, 0.2, 2.0, 4.0),
        ]

    def test_rows_per_layer(self):
        """Test that the table has one row per layer with nonnegative distances"""
        table = layer_distance_table(self.layers, self.full)
        self.assertEqual(len(table.rows), 3)
        for row in table.rows:
            self.assertGreaterEqual(row.wasserstein, 0.0)
            self.assertTrue(0.0 <= row.js <= math.log(2))
        self.assertEqual(table.argmin_wasserstein, 1)
        self.assertTrue(table.argmin_in_middle())

    def test_self_as_pseudo_layer(self):
        """Test that the full density inserted as a layer sits at distance 0"""
        table = layer_distance_table(self.layers[:2] + [self.full], self.full, names=['a', 'b', 'full'])
        self.assertEqual(table.rows[2].wasserstein, 0.0)
        self.assertEqual(table.rows[2].js, 0.0)
        self.assertEqual((table.argmin_wasserstein, table.argmin_js), (2, 2))

    def test_csv_columns(self):
        """Test that the CSV header is layer,name,wasserstein,js"""
        table = layer_distance_table(self.layers, self.full)
        with tempfile.TemporaryDirectory() as tmp:
            lines = Path(table.to_csv(Path(tmp) / 'distances.csv')).read_text().splitlines()
        self.assertEqual(lines[0], 'layer,name,wasserstein,js')
        self.assertEqual(len(lines), 4)


def trained_blob_model(widths, seed, epochs):
    train_ds = make_blobs(widths[-1], 500, widths[0], 6.0, seed=1)
    config = TrainConfig.from_options(epochs=epochs, seed=seed, metric_probes=0)
    checkpoint = train(config, ModelSpec.mlp(widths), train_ds).checkpoint
    _, registry = build(checkpoint.spec, seed)
    return checkpoint, registry, train_ds


@tag('slow')
class TrainedSpectraTest(SimpleTestCase):
    def test_middle_layer_is_closest(self):
        """Test that a six-layer blob MLP has its Wasserstein argmin in the middle band in 3 of 5 seeds"""
        hits = 0
        for seed in range(5):
            checkpoint, registry, train_ds = trained_blob_model([16, 32, 32, 32, 32, 32, 3], seed, epochs=20)
            probe = probe_set(train_ds, 2048, seed=seed)
            full = slq_density(hessian_op(checkpoint.params, registry, probe, checkpoint.running), seed=seed)
            layers = [
                slq_density(layer_hessian_op(checkpoint.params, registry, l, probe, checkpoint.running), seed=seed)
                for l in range(registry.num_layers)
            ]
            table = layer_distance_table(layers, full, registry.names, grid_points=2048)
            hits += table.argmin_in_middle(registry.num_layers)
        self.assertGreaterEqual(hits, 3)

    def test_delta_purity(self):
        """Test that δ vectors of a trained blob MLP cluster by class with purity 0.8 in 3 of 5 seeds"""
        pure = 0
        for seed in range(5):
            checkpoint, registry, train_ds = trained_blob_model([16, 32, 32, 32, 3], seed, epochs=30)
            deltas = extract_deltas(checkpoint.params, registry, probe_set(train_ds, 512, seed=seed),
                                    running=checkpoint.running)
            pure += cluster_purity(deltas) >= 0.8
        self.assertGreaterEqual(pure, 3)
