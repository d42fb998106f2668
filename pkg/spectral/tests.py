import math

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from adcore.params import DTYPE
from hesslens.exceptions import ConfigurationError, NumericError
from hessops.operators import CurvatureOperator, DenseOperator
from spectral.density import broadening_width, slq_density
from spectral.lanczos import extreme_eigenvalues, lambda_max, lanczos, rescale_to_unit
from spectral.trace import hutchinson_trace


def random_symmetric(dim, seed=0):
    generator = torch.Generator().manual_seed(seed)
    a = torch.randn(dim, dim, dtype=DTYPE, generator=generator)
    return 0.5 * (a + a.T)


def positive_spectrum_matrix(dim, seed=0):
    generator = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(dim, dim, dtype=DTYPE, generator=generator))
    eigenvalues = 1.0 + 4.0 * torch.rand(dim, dtype=DTYPE, generator=generator)
    return q @ torch.diag(eigenvalues) @ q.T


class NanOperator(CurvatureOperator):
    kind = 'dense'

    def _apply(self, v):
        return torch.full_like(v, float('nan'))


class LanczosTest(SimpleTestCase):
    def test_identity_breaks_down(self):
        """Test that the identity breaks down after one step with a unit Ritz pair"""
        with self.assertLogs('spectral.lanczos', level='WARNING'):
            factor = lanczos(DenseOperator.identity(10), 5, seed=0)
        self.assertEqual(factor.order, 1)
        self.assertTrue(factor.broke_down)
        self.assertAlmostEqual(float(factor.ritz_values[0]), 1.0, places=14)
        self.assertEqual(factor.ritz_weights.tolist(), [1.0])

    def test_small_diagonal(self):
        """Test that diag(−1, 0, 1) yields exactly its eigenvalues"""
        factor = lanczos(DenseOperator.diagonal([-1.0, 0.0, 1.0]), 3, seed=2)
        self.assertTrue(np.allclose(np.sort(factor.ritz_values), [-1.0, 0.0, 1.0], atol=1e-8))

    def test_full_order_matches_dense(self):
        """Test that M = D reproduces every dense eigenvalue"""
        matrix = random_symmetric(50, seed=1)
        factor = lanczos(DenseOperator(matrix), 50, seed=3)
        dense = torch.linalg.eigvalsh(matrix).numpy()
        self.assertTrue(np.allclose(np.sort(factor.ritz_values), dense, atol=1e-7))

    def test_weights_sum_to_one(self):
        """Test that Ritz weights sum to one"""
        factor = lanczos(DenseOperator(random_symmetric(40, seed=4)), 20, seed=5)
        self.assertAlmostEqual(float(factor.ritz_weights.sum()), 1.0, delta=1e-10)
        self.assertTrue(np.all(factor.betas >= 0))
        self.assertEqual(len(factor.betas), factor.order - 1)

    def test_without_reorthogonalization(self):
        """Test that the plain recurrence still finds the extreme eigenvalues"""
        matrix = random_symmetric(30, seed=6)
        factor = lanczos(DenseOperator(matrix), 30, seed=0, reorthogonalize=False)
        dense = torch.linalg.eigvalsh(matrix).numpy()
        self.assertAlmostEqual(float(factor.ritz_values.max()), float(dense[-1]), places=6)

    def test_deterministic(self):
        """Test that one seed gives one factor"""
        op = DenseOperator(random_symmetric(20, seed=7))
        self.assertTrue(np.array_equal(lanczos(op, 10, seed=9).alphas, lanczos(op, 10, seed=9).alphas))

    def test_invalid_steps(self):
        """Test that M outside [1, D] is rejected"""
        op = DenseOperator.identity(4)
        for steps in (0, 5):
            with self.subTest(steps=steps), self.assertRaises(ConfigurationError):
                lanczos(op, steps, seed=0)

    def test_nan_operator(self):
        """Test that a NaN product is a numeric error"""
        with self.assertRaises(NumericError):
            lanczos(NanOperator(4), 3, seed=0)


class ExtremeEigenvalueTest(SimpleTestCase):
    def test_identity(self):
        """Test that λ_max of the identity is 1"""
        self.assertAlmostEqual(lambda_max(DenseOperator.identity(6)), 1.0, places=14)

    def test_algebraic_and_magnitude(self):
        """Test that diag(3, −5) gives 3 algebraically and 5 by magnitude"""
        op = DenseOperator.diagonal([3.0, -5.0])
        self.assertAlmostEqual(lambda_max(op), 3.0, places=10)
        self.assertAlmostEqual(lambda_max(op, magnitude=True), 5.0, places=10)
        self.assertAlmostEqual(extreme_eigenvalues(op)[0], -5.0, places=10)

    def test_extremes_from_one_run(self):
        """Test that both ends of a small diagonal spectrum come from one run"""
        low, high = extreme_eigenvalues(DenseOperator.diagonal([0.5, -2.0, 4.0, 1.0]))
        self.assertAlmostEqual(low, -2.0, places=10)
        self.assertAlmostEqual(high, 4.0, places=10)

    def test_random_symmetric(self):
        """Test that a full run matches the dense λ_max of a 200×200 matrix"""
        matrix = random_symmetric(200, seed=8)
        expected = float(torch.linalg.eigvalsh(matrix)[-1])
        self.assertLess(abs(lambda_max(DenseOperator(matrix), M=200, seed=1) - expected), 1e-6 * abs(expected))


class RescaleTest(SimpleTestCase):
    def test_affine_arithmetic(self):
        """Test that diag(0, 10) maps with a = 5.25 and b = 5"""
        rescaled, scale, shift, degenerate = rescale_to_unit(DenseOperator.diagonal([0.0, 10.0]))
        self.assertAlmostEqual(scale, 5.25, places=10)
        self.assertAlmostEqual(shift, 5.0, places=10)
        self.assertFalse(degenerate)
        eigenvalues = torch.linalg.eigvalsh(torch.stack([rescaled.apply(e) for e in torch.eye(2, dtype=DTYPE)]))
        self.assertTrue(torch.all(eigenvalues.abs() <= 1.0))

    def test_zero_operator(self):
        """Test that a zero operator is degenerate with unit scale"""
        with self.assertLogs('spectral.lanczos', level='WARNING'):
            _, scale, shift, degenerate = rescale_to_unit(DenseOperator(torch.zeros(4, 4, dtype=DTYPE)))
        self.assertTrue(degenerate)
        self.assertEqual((scale, shift), (1.0, 0.0))

    def test_random_matrix_inside_unit_interval(self):
        """Test that a rescaled random matrix has its spectrum in [−1, 1]"""
        matrix = random_symmetric(25, seed=3)
        rescaled = rescale_to_unit(DenseOperator(matrix)).operator
        dense = torch.stack([rescaled.apply(e) for e in torch.eye(25, dtype=DTYPE)], dim=1)
        self.assertLessEqual(float(torch.linalg.eigvalsh(0.5 * (dense + dense.T)).abs().max()), 1.0)


class DensityTest(SimpleTestCase):
    def test_two_level_spectrum(self):
        """Test that eigenvalues 1 (×90) and 10 (×10) split the mass 0.9 / 0.1"""
        op = DenseOperator.diagonal([1.0] * 90 + [10.0] * 10)
        density = slq_density(op, num_probes=64, seed=0)
        low = density.grid < 5.5
        near_one = float(np.sum(density.weights[low]) * density.spacing)
        near_ten = float(np.sum(density.weights[~low]) * density.spacing)
        self.assertAlmostEqual(near_one, 0.9, delta=0.02)
        self.assertAlmostEqual(near_ten, 0.1, delta=0.02)

    def test_identity_bump(self):
        """Test that the identity gives one bump centered at 1"""
        with self.assertLogs('spectral.lanczos', level='WARNING'):
            density = slq_density(DenseOperator.identity(10), num_probes=2)
        self.assertTrue(density.degenerate)
        self.assertAlmostEqual(float(density.grid[np.argmax(density.weights)]), 1.0, delta=2 * density.spacing)

    def test_moments(self):
        """Test that the density has unit mass and first moment Tr/D"""
        matrix = positive_spectrum_matrix(100, seed=2)
        density = slq_density(DenseOperator(matrix), num_probes=32, seed=1)
        self.assertAlmostEqual(density.mass(), 1.0, delta=0.02)
        expected = float(torch.trace(matrix)) / 100
        self.assertLess(abs(density.moment(1) - expected), 0.05 * expected)

    def test_grid(self):
        """Test that the grid is uniform, increasing and the density nonnegative"""
        density = slq_density(DenseOperator(random_symmetric(30, seed=5)), K=256, num_probes=2)
        steps = np.diff(density.grid)
        self.assertEqual(len(density.grid), 256)
        self.assertTrue(np.all(steps > 0))
        self.assertTrue(np.allclose(steps, steps[0]))
        self.assertTrue(np.all(density.weights >= 0))

    def test_broadening_width(self):
        """Test the κ formula for the broadening width"""
        self.assertAlmostEqual(broadening_width(80, 3.0), 2.0 / (79 * math.sqrt(8 * math.log(3.0))), places=15)

    def test_invalid_parameters(self):
        """Test that K < 2, κ ≤ 1 and zero probes are rejected"""
        op = DenseOperator.identity(3)
        for kwargs in ({'K': 1}, {'kappa': 1.0}, {'num_probes': 0}):
            with self.subTest(**kwargs), self.assertRaises(ConfigurationError):
                slq_density(op, **kwargs)

    def test_threaded_probes_match(self):
        """Test that concurrent probes give the serial density"""
        op = DenseOperator(random_symmetric(30, seed=9))
        serial = slq_density(op, M=15, num_probes=4, seed=3)
        threaded = slq_density(op, M=15, num_probes=4, seed=3, workers=2)
        self.assertTrue(np.allclose(serial.weights, threaded.weights, rtol=1e-12, atol=1e-14))


class HutchinsonTest(SimpleTestCase):
    def test_rademacher_identity(self):
        """Test that Rademacher probes give exactly D on the identity"""
        estimate = hutchinson_trace(DenseOperator.identity(100), n=7, distribution='rademacher', seed=4)
        self.assertEqual(estimate.mean, 100.0)
        self.assertEqual(estimate.stderr, 0.0)

    def test_gaussian_diagonal(self):
        """Test that diag(1, 2, 3) averages to 6 within three standard errors"""
        estimate = hutchinson_trace(DenseOperator.diagonal([1.0, 2.0, 3.0]), n=10000, seed=0)
        self.assertLess(abs(estimate.mean - 6.0), 3 * estimate.stderr)

    def test_zero_operator(self):
        """Test that the zero operator has trace exactly 0"""
        estimate = hutchinson_trace(DenseOperator(torch.zeros(5, 5, dtype=DTYPE)), n=10)
        self.assertEqual(estimate.mean, 0.0)

    def test_single_probe(self):
        """Test that one probe reports zero standard error"""
        estimate = hutchinson_trace(DenseOperator.identity(3), n=1)
        self.assertEqual((estimate.n, estimate.stderr), (1, 0.0))

    def test_standard_error(self):
        """Test that the standard error is the sample stdev over √n"""
        op = DenseOperator(random_symmetric(8, seed=1))
        estimate = hutchinson_trace(op, n=25, seed=2)
        self.assertEqual(estimate.to_dict()['n'], 25)
        self.assertGreater(estimate.stderr, 0.0)

    def test_nan_reports_seed(self):
        """Test that a NaN probe raises with its seed"""
        with self.assertRaises(NumericError) as caught:
            hutchinson_trace(NanOperator(3), n=2, seed=6)
        self.assertEqual(caught.exception.seed, 6)

    def test_unknown_distribution(self):
        """Test that an unknown probe distribution is rejected"""
        with self.assertRaises(ConfigurationError):
            hutchinson_trace(DenseOperator.identity(3), distribution='uniform')


@tag('slow')
class HutchinsonStatisticsTest(SimpleTestCase):
    def setUp(self):
        self.matrix = random_symmetric(30, seed=11) + 6.0 * torch.eye(30, dtype=DTYPE)
        self.op = DenseOperator(self.matrix)
        self.truth = float(torch.trace(self.matrix))

    def test_unbiased(self):
        """Test that the grand mean of 50 runs lies within two standard errors of the trace"""
        means = np.array([hutchinson_trace(self.op, n=20, seed=1000 + 64 * r).mean for r in range(50)])
        grand_stderr = means.std(ddof=1) / math.sqrt(len(means))
        self.assertLess(abs(means.mean() - self.truth), 2 * grand_stderr)

    def test_rademacher_variance_ordering(self):
        """Test that Rademacher probes vary less than Gaussian probes"""
        gaussian = [hutchinson_trace(self.op, n=10, seed=3000 + 16 * r).mean for r in range(40)]
        rademacher = [
            hutchinson_trace(self.op, n=10, distribution='rademacher', seed=3000 + 16 * r).mean for r in range(40)
        ]
        self.assertLess(np.var(rademacher), np.var(gaussian))
