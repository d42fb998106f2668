import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase, tag

from adcore.params import DTYPE, ParamVector
from dataio.datasets import make_blobs
from hesslens.exceptions import ConfigurationError, DimensionError, DivergenceError, FormatError, NumericError
from htrtrain.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from htrtrain.config import TrainConfig
from htrtrain.loop import RunLog, train, wall_clock_ratio
from htrtrain.optim import sgd_step
from htrtrain.regularizer import select_layers, step_seed, trace_penalty_gradient
from htrtrain.serializers import SpectrumOptionsSerializer, validated
from nnmodels.networks import build
from nnmodels.specs import ModelSpec


def small_config(**overrides):
    options = dict(
        epochs=2, batch_size=16, lr=0.05, metric_probes=2, metric_lanczos_steps=8, probe_set_size=30,
    )
    options.update(overrides)
    return TrainConfig.from_options(**options)


def scalar_params(value):
    return ParamVector.from_sizes(torch.tensor([value], dtype=DTYPE), [('w', 1)])


class SgdStepTest(SimpleTestCase):
    def test_plain_gradient_descent(self):
        """Test that zero momentum and decay reduce to θ − lr·g"""
        config = TrainConfig(lr=0.1, momentum=0.0, l2=0.0)
        params = ParamVector.from_sizes(torch.tensor([1.0, -2.0], dtype=DTYPE), [('w', 2)])
        grads = torch.tensor([0.5, 1.0], dtype=DTYPE)
        updated, buffers = sgd_step(params, grads, torch.zeros(2, dtype=DTYPE), config)
        self.assertTrue(torch.allclose(updated.values, torch.tensor([0.95, -2.1], dtype=DTYPE)))
        self.assertTrue(torch.equal(buffers, grads))
        self.assertEqual(params.values.tolist(), [1.0, -2.0])

    def test_zero_gradient_is_fixed_point(self):
        """Test that a zero gradient without decay or momentum leaves parameters unchanged"""
        config = TrainConfig(lr=0.1, momentum=0.9, l2=0.0)
        params = scalar_params(0.3)
        updated, _ = sgd_step(params, torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE), config)
        self.assertTrue(torch.equal(updated.values, params.values))

    def test_momentum_on_quadratic(self):
        """Test two momentum steps on θ²/2 against hand-computed values"""
        config = TrainConfig(lr=0.1, momentum=0.9, l2=0.0)
        params, buffers = scalar_params(1.0), torch.zeros(1, dtype=DTYPE)
        params, buffers = sgd_step(params, params.values.clone(), buffers, config)
        self.assertAlmostEqual(float(params.values[0]), 0.9, places=14)
        params, buffers = sgd_step(params, params.values.clone(), buffers, config)
        self.assertAlmostEqual(float(buffers[0]), 1.8, places=14)
        self.assertAlmostEqual(float(params.values[0]), 0.72, places=14)

    def test_weight_decay(self):
        """Test that the L2 term pulls parameters toward zero"""
        config = TrainConfig(lr=0.5, momentum=0.0, l2=0.1)
        updated, _ = sgd_step(scalar_params(1.0), torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE), config)
        self.assertAlmostEqual(float(updated.values[0]), 0.95, places=14)

    def test_non_finite_gradient(self):
        """Test that a NaN gradient raises NumericError carrying the step"""
        with self.assertRaises(NumericError) as ctx:
            sgd_step(scalar_params(1.0), torch.tensor([float('nan')], dtype=DTYPE), torch.zeros(1, dtype=DTYPE),
                     TrainConfig(), step=7)
        self.assertEqual(ctx.exception.step, 7)

    def test_shape_mismatch(self):
        """Test that a gradient of the wrong length is rejected"""
        with self.assertRaises(DimensionError):
            sgd_step(scalar_params(1.0), torch.zeros(2, dtype=DTYPE), torch.zeros(1, dtype=DTYPE), TrainConfig())


class TracePenaltyTest(SimpleTestCase):
    def test_quadratic_has_zero_penalty_gradient(self):
        """Test that a constant Hessian contributes no penalty gradient"""
        matrix = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=DTYPE)
        params = ParamVector.from_sizes(torch.tensor([0.3, -0.7], dtype=DTYPE), [('a', 1), ('b', 1)])
        grad = trace_penalty_gradient(lambda theta: 0.5 * theta @ matrix @ theta, params, (0, 1), probes=3)
        self.assertEqual(grad.values.tolist(), [0.0, 0.0])

    def test_quartic(self):
        """Test that the trace gradient of θ⁴ is 24θ"""
        grad = trace_penalty_gradient(lambda theta: (theta ** 4).sum(), scalar_params(0.5), (0,), seed=11)
        self.assertAlmostEqual(float(grad.values[0]), 12.0, places=12)

    def test_unbiased_with_cross_terms(self):
        """Test that averaged probes recover ∇Tr(Hess) of θ₀²θ₁² although single probes do not"""
        params = ParamVector.from_sizes(torch.tensor([0.5, -1.0], dtype=DTYPE), [('a', 1), ('b', 1)])

        def loss_fn(theta):
            return theta[0] ** 2 * theta[1] ** 2

        # Tr(Hess) = 2θ₁² + 2θ₀²; each probe adds 8·v₀v₁·(θ₁, θ₀)
        expected = 4.0 * params.values
        singles = {
            tuple(trace_penalty_gradient(loss_fn, params, (0, 1), seed=seed).values.tolist()) for seed in range(20)
        }
        self.assertEqual(len(singles), 2)
        for single in singles:
            self.assertAlmostEqual(abs(single[0] - 2.0), 8.0, places=10)
        probes = 2000
        averaged = trace_penalty_gradient(loss_fn, params, (0, 1), probes=probes, seed=3).values
        bound = 5 * 8.0 * float(params.values.abs().max()) / probes ** 0.5
        self.assertLess(float((averaged - expected).abs().max()), bound)

    def test_unselected_layers_get_no_penalty(self):
        """Test that layers outside the selection see only cross terms"""
        params = ParamVector.from_sizes(torch.tensor([0.5, 0.5], dtype=DTYPE), [('a', 1), ('b', 1)])
        grad = trace_penalty_gradient(lambda theta: (theta ** 4).sum(), params, (1,))
        self.assertEqual(float(grad.values[0]), 0.0)
        self.assertAlmostEqual(float(grad.values[1]), 12.0, places=12)

    def test_layer_weights_scale_penalty(self):
        """Test that a layer weight multiplies its penalty gradient"""
        grad = trace_penalty_gradient(
            lambda theta: (theta ** 4).sum(), scalar_params(0.5), (0,), layer_weights={0: 0.25}
        )
        self.assertAlmostEqual(float(grad.values[0]), 3.0, places=12)

    def test_requires_selection_and_probes(self):
        """Test that empty selections and zero probes are rejected"""
        with self.assertRaises(ConfigurationError):
            trace_penalty_gradient(lambda theta: theta.sum(), scalar_params(1.0), ())
        with self.assertRaises(ConfigurationError):
            trace_penalty_gradient(lambda theta: theta.sum(), scalar_params(1.0), (0,), probes=0)

    def test_step_seeds_differ(self):
        """Test that consecutive steps draw different probe seeds"""
        self.assertNotEqual(step_seed(0, 1), step_seed(0, 2))
        self.assertEqual(step_seed(4, 9), step_seed(4, 9))


class SelectLayersTest(SimpleTestCase):
    def test_middle_band(self):
        """Test the middle band for eight and four layers"""
        self.assertEqual(select_layers(8, 'middle'), (2, 3, 4, 5))
        self.assertEqual(select_layers(4, 'middle'), (1, 2))

    def test_three_layers_warns(self):
        """Test that a three-layer middle band covers every layer with a warning"""
        with self.assertLogs('htrtrain.regularizer', level='WARNING'):
            self.assertEqual(select_layers(3, 'middle'), (0, 1, 2))

    def test_explicit_lists(self):
        """Test that explicit selections are sorted and deduplicated"""
        self.assertEqual(select_layers(5, '3,1,3'), (1, 3))
        self.assertEqual(select_layers(5, [4, 0]), (0, 4))
        self.assertEqual(select_layers(2, 'all'), (0, 1))

    def test_invalid_selections(self):
        """Test that out-of-range, empty and malformed selections raise"""
        for mode in ('0,9', '', 'first'):
            with self.assertRaises(ConfigurationError):
                select_layers(3, mode)


class TrainConfigTest(SimpleTestCase):
    def test_defaults(self):
        """Test the default hyperparameters"""
        config = TrainConfig.from_options()
        self.assertEqual((config.lr, config.momentum, config.l2, config.batch_size), (1e-2, 0.9, 1e-3, 64))
        self.assertFalse(config.htr_active)

    def test_invalid_fields_are_listed(self):
        """Test that every invalid field appears in the error"""
        with self.assertRaises(ConfigurationError) as ctx:
            TrainConfig.from_options(lr=0.0, batch_size=0, htr_layers='x,y')
        message = str(ctx.exception)
        for name in ('lr', 'batch_size', 'htr_layers'):
            self.assertIn(name, message)

    def test_layer_list_normalized(self):
        """Test that list selections become comma-separated strings"""
        config = TrainConfig.from_options(htr_layers=[2, 1], htr_gamma=0.1, htr_frequency=5)
        self.assertEqual(config.htr_layers, '2,1')
        self.assertTrue(config.htr_active)

    def test_hash_tracks_config(self):
        """Test that the config hash is stable and changes with any field"""
        self.assertEqual(TrainConfig().config_hash(), TrainConfig().config_hash())
        self.assertNotEqual(TrainConfig().config_hash(), TrainConfig(seed=1).config_hash())

    def test_spectrum_options(self):
        """Test spectrum option validation"""
        options = validated(
            SpectrumOptionsSerializer,
            {'operator': 'hessian,g', 'scope': 'layer:2', 'lanczos_m': 10, 'grid_k': 64, 'kappa': 3.0, 'probes': 2},
        )
        self.assertEqual(options['operator'], ['hessian', 'g'])
        for bad in ({'kappa': 1.0}, {'operator': 'fisher'}, {'scope': 'layer:x'}):
            data = {'lanczos_m': 10, 'grid_k': 64, 'kappa': 3.0, 'probes': 2, **bad}
            with self.assertRaises(ConfigurationError):
                validated(SpectrumOptionsSerializer, data)


class TrainingRunTest(SimpleTestCase):
    def setUp(self):
        self.spec = ModelSpec.mlp([4, 8, 3])
        self.train_ds, self.test_ds = make_blobs(3, 20, 4, 3.0, seed=0, test_per_class=5)

    def strip(self, log):
        return [{k: v for k, v in r.items() if k not in ('wall_clock', 'config_hash')} for r in log.records]

    def test_zero_epochs(self):
        """Test that zero epochs logs only the initial record and keeps the initialization"""
        result = train(small_config(epochs=0), self.spec, self.train_ds, self.test_ds)
        self.assertEqual([r['epoch'] for r in result.run_log.records], [0])
        params, _ = build(self.spec, 0)
        self.assertTrue(torch.equal(result.checkpoint.params.values, params.values))

    def test_records_per_epoch(self):
        """Test that each epoch adds a full record"""
        result = train(small_config(), self.spec, self.train_ds, self.test_ds)
        records = result.run_log.records
        self.assertEqual([r['epoch'] for r in records], [0, 1, 2])
        last = records[-1]
        for column in ('train_loss', 'test_acc', 'lambda_max_full', 'trace_full', 'lambda_max_l1', 'trace_l0'):
            self.assertIsNotNone(last[column])
        self.assertGreaterEqual(last['lambda_max_full'], last['lambda_min_full'])
        self.assertGreater(last['wall_clock'], 0.0)
        self.assertIn(last['closest_layer'], (0, 1))

    def test_deterministic(self):
        """Test that identical configs give identical logs and parameters"""
        first = train(small_config(), self.spec, self.train_ds, self.test_ds)
        second = train(small_config(), self.spec, self.train_ds, self.test_ds)
        self.assertEqual(self.strip(first.run_log), self.strip(second.run_log))
        self.assertTrue(torch.equal(first.checkpoint.params.values, second.checkpoint.params.values))

    def test_disabled_frequency_matches_plain_training(self):
        """Test that γ > 0 with f_r = 0 follows the unregularized trajectory"""
        plain = train(small_config(), self.spec, self.train_ds)
        with self.assertLogs('htrtrain.loop', level='WARNING'):
            idle = train(small_config(htr_gamma=1e-2, htr_frequency=0), self.spec, self.train_ds)
        self.assertEqual(self.strip(plain.run_log), self.strip(idle.run_log))
        self.assertTrue(torch.equal(plain.checkpoint.params.values, idle.checkpoint.params.values))

    def test_regularizer_changes_trajectory(self):
        """Test that an active regularizer moves the parameters"""
        plain = train(small_config(epochs=1, metric_probes=0), self.spec, self.train_ds)
        htr = train(small_config(epochs=1, metric_probes=0, htr_gamma=0.1, htr_frequency=1), self.spec, self.train_ds)
        self.assertFalse(torch.equal(plain.checkpoint.params.values, htr.checkpoint.params.values))

    def test_batch_norm_model_trains(self):
        """Test a regularized run on a batch-normalized network"""
        spec = ModelSpec.mlp([4, 8, 8, 3], batch_norm=True)
        config = small_config(epochs=1, metric_probes=0, htr_gamma=0.01, htr_frequency=2, htr_layers='middle')
        result = train(config, spec, self.train_ds)
        self.assertTrue(torch.isfinite(result.checkpoint.params.values).all())
        self.assertGreater(len(result.checkpoint.running), 0)

    def test_divergence(self):
        """Test that a loss above the threshold stops training"""
        with self.assertRaises(DivergenceError) as ctx:
            train(small_config(divergence_threshold=1e-6), self.spec, self.train_ds)
        self.assertEqual(ctx.exception.step, 1)

    def test_missing_test_set_leaves_blank_columns(self):
        """Test that runs without a test split write empty test cells"""
        with tempfile.TemporaryDirectory() as out:
            result = train(small_config(epochs=1, metric_probes=0, checkpoint_every=1), self.spec, self.train_ds,
                           out_dir=out)
            self.assertTrue((Path(out) / 'final.hlns').exists())
            self.assertTrue((Path(out) / 'checkpoints' / 'epoch_0001.hlns').exists())
            log = RunLog.from_csv(Path(out) / 'runlog.csv')
        self.assertEqual(log.columns, result.run_log.columns)
        self.assertIsNone(log.records[1]['test_loss'])
        self.assertEqual(log.records[1]['train_loss'], result.run_log.records[1]['train_loss'])

    def test_csv_header_order(self):
        """Test that the run log CSV starts with the fixed metric prefix, then layer columns, then extras"""
        with tempfile.TemporaryDirectory() as out:
            train(small_config(epochs=0, metric_probes=2), self.spec, self.train_ds, out_dir=out)
            header = (Path(out) / 'runlog.csv').read_text().splitlines()[0].split(',')
        self.assertEqual(header[:8], [
            'epoch', 'train_loss', 'train_acc', 'test_loss', 'test_acc',
            'lambda_max_full', 'trace_full', 'trace_stderr',
        ])
        self.assertEqual(header[8:14], [
            'lambda_max_l0', 'trace_l0', 'trace_stderr_l0', 'lambda_max_l1', 'trace_l1', 'trace_stderr_l1',
        ])
        self.assertEqual(header[14:], [
            'lambda_min_full', 'trace_layer_sum', 'closest_layer', 'wall_clock', 'config_hash', 'seed',
        ])


class WallClockRatioTest(SimpleTestCase):
    def log(self, times):
        log = RunLog(config_hash='x', seed=0, num_layers=1)
        log.append({'epoch': 0, 'wall_clock': None})
        for epoch, seconds in enumerate(times, start=1):
            log.append({'epoch': epoch, 'wall_clock': seconds})
        return log

    def test_ratio(self):
        """Test the mean and standard error of per-epoch ratios"""
        mean, stderr = wall_clock_ratio(self.log([2.0, 4.0]), self.log([1.0, 1.0]))
        self.assertAlmostEqual(mean, 3.0)
        self.assertAlmostEqual(stderr, 1.0)

    def test_out_of_order_epochs(self):
        """Test that appending an earlier epoch is rejected"""
        log = self.log([1.0])
        with self.assertRaises(ValueError):
            log.append({'epoch': 1, 'wall_clock': 1.0})


class CheckpointTest(SimpleTestCase):
    def setUp(self):
        self.spec = ModelSpec.mlp([4, 6, 6, 3], batch_norm=True)
        params, registry = build(self.spec, 5)
        running = registry.initial_running_stats()
        name = running.names()[0]
        mean, var = running.get(name)
        running.update(name, mean + 1.5, var * 2.0)
        momentum = torch.linspace(-1.0, 1.0, params.dim, dtype=DTYPE)
        self.checkpoint = Checkpoint(self.spec, params, momentum, epoch=3, seed=5, running=running)
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'nested' / 'model.hlns'
        save_checkpoint(self.checkpoint, self.path)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        """Test that a saved checkpoint loads back bit-identically"""
        loaded = load_checkpoint(self.path, spec=self.spec)
        self.assertEqual(loaded.spec, self.spec)
        self.assertEqual((loaded.epoch, loaded.seed), (3, 5))
        self.assertTrue(torch.equal(loaded.params.values, self.checkpoint.params.values))
        self.assertTrue(torch.equal(loaded.momentum, self.checkpoint.momentum))
        self.assertEqual(loaded.running.names(), self.checkpoint.running.names())
        for name in loaded.running.names():
            for stored, original in zip(loaded.running.get(name), self.checkpoint.running.get(name)):
                self.assertTrue(torch.equal(stored, original))

    def test_bad_magic(self):
        """Test that a corrupted header is a format error"""
        payload = bytearray(self.path.read_bytes())
        payload[0:4] = b'XXXX'
        self.path.write_bytes(bytes(payload))
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_truncated(self):
        """Test that a truncated file is a format error"""
        self.path.write_bytes(self.path.read_bytes()[:-9])
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_other_model_rejected(self):
        """Test that loading into a different architecture is a dimension error"""
        with self.assertRaises(DimensionError):
            load_checkpoint(self.path, spec=ModelSpec.mlp([4, 5, 3]))


@tag('slow')
class BlobTrainingTest(SimpleTestCase):
    def setUp(self):
        self.spec = ModelSpec.mlp([16, 32, 32, 32, 3])
        self.train_ds, self.test_ds = make_blobs(3, 500, 16, 6.0, seed=1, test_per_class=100)

    def test_plain_and_regularized_runs_learn(self):
        """Test that blobs are learned with and without the middle-layer penalty"""
        options = dict(epochs=5, metric_probes=5, metric_lanczos_steps=16, probe_set_size=256)
        plain = train(TrainConfig.from_options(**options), self.spec, self.train_ds, self.test_ds)
        htr = train(
            TrainConfig.from_options(htr_gamma=1e-2, htr_frequency=50, htr_layers='middle', **options),
            self.spec, self.train_ds, self.test_ds,
        )
        first, last = plain.run_log.records[0], plain.run_log.records[-1]
        self.assertLess(last['train_loss'], first['train_loss'])
        self.assertGreaterEqual(last['test_acc'], 0.95)
        self.assertGreaterEqual(htr.run_log.records[-1]['test_acc'], last['test_acc'] - 0.05)


@tag('slow')
class BlobCurvatureTest(SimpleTestCase):
    """Thirty-epoch blob runs with default hyperparameters, one per seed."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = ModelSpec.mlp([16, 32, 32, 32, 3])
        cls.train_ds, cls.test_ds = make_blobs(3, 500, 16, 6.0, seed=1, test_per_class=100)
        cls.plain = [cls.train_seed(seed) for seed in range(5)]

    @classmethod
    def train_seed(cls, seed, **options):
        config = TrainConfig.from_options(epochs=30, seed=seed, **options)
        return train(config, cls.spec, cls.train_ds, cls.test_ds).run_log

    def test_curvature_falls_from_peak(self):
        """Test that the final trace is at most half its peak and λ_max ends at or below its peak in 4 of 5 seeds"""
        passed = 0
        for log in self.plain:
            traces, tops = log.column('trace_full'), log.column('lambda_max_full')
            passed += traces[-1] <= 0.5 * max(traces) and tops[-1] <= max(tops)
        self.assertGreaterEqual(passed, 4)

    def test_per_step_penalty_lowers_layer_traces(self):
        """Test that a per-step penalty on every layer ends with a lower Σ Tr(Hess_l) in 4 of 5 matched seeds"""
        lower = 0
        for seed, plain in enumerate(self.plain):
            htr = self.train_seed(seed, htr_gamma=1e-2, htr_frequency=1, htr_layers='all')
            baseline, regularized = plain.records[-1], htr.records[-1]
            lower += (
                regularized['trace_layer_sum'] < baseline['trace_layer_sum']
                and regularized['test_acc'] >= baseline['test_acc'] - 0.01
            )
        self.assertGreaterEqual(lower, 4)
