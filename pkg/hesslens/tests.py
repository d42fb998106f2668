import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import torch
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings
from django.conf import settings

from hesslens import __version__
from hesslens.artifacts import RunManifest, cell, content_hash
from hesslens.management.commands.train import Command as TrainCommand
from hesslens.management.commands.oracle import Command as OracleCommand
from htrtrain.checkpoints import Checkpoint, save_checkpoint
from htrtrain.loop import RunLog
from nnmodels.networks import build
from nnmodels.specs import ModelSpec
from specanalysis.distances import wasserstein1
from spectral.density import SpectralDensity

DATA = 'blobs:C=3,n=20,dim=4,sep=3,test=5'


def run(*args):
    call_command(*args, stdout=StringIO())


def read_rows(path):
    lines = Path(path).read_text().splitlines()
    return lines[0].split(','), [line.split(',') for line in lines[1:]]


def without_timing(log):
    return [{k: v for k, v in r.items() if k not in ('wall_clock', 'config_hash')} for r in log.records]


def read_density(path):
    table = np.loadtxt(path, delimiter=',', skiprows=1)
    return SpectralDensity.from_arrays(table[:, 0], table[:, 1])


class CommandTestCase(SimpleTestCase):
    """Trains one small model shared by the analysis command tests."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.root = Path(tempfile.mkdtemp())
        cls.run_dir = cls.root / 'run'
        run('train', '--model', 'mlp:4,8,3', '--data', DATA, '--epochs', '2', '--checkpoint-every', '1',
            '--metric-probes', '2', '--lr', '0.05', '--batch', '16', '--out', str(cls.run_dir))
        cls.ckpt = str(cls.run_dir / 'final.hlns')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)
        super().tearDownClass()

    def setUp(self):
        self.out = Path(tempfile.mkdtemp(dir=self.root))

    def manifest(self, out=None):
        return json.loads(((out or self.out) / 'manifest.json').read_text())


class TrainCommandTest(CommandTestCase):
    def test_artifacts(self):
        """Test that train writes the run log, checkpoints and manifest"""
        for name in ('runlog.csv', 'final.hlns', 'manifest.json', 'checkpoints/epoch_0001.hlns',
                     'checkpoints/epoch_0002.hlns'):
            self.assertTrue((self.run_dir / name).exists(), name)
        log = RunLog.from_csv(self.run_dir / 'runlog.csv')
        self.assertEqual([r['epoch'] for r in log.records], [0, 1, 2])
        self.assertIsNotNone(log.records[-1]['test_acc'])

    def test_manifest_records_defaults(self):
        """Test that omitted flags resolve to the default hyperparameters"""
        manifest = self.manifest(self.run_dir)
        self.assertEqual(manifest['command'], 'train')
        self.assertEqual(manifest['version'], __version__)
        self.assertEqual(manifest['config']['momentum'], 0.9)
        self.assertEqual(manifest['config']['l2'], 1e-3)
        self.assertEqual(manifest['config']['htr_gamma'], 0.0)
        self.assertEqual(manifest['inputs']['data']['sha256'], content_hash(DATA))
        self.assertIn('runlog.csv', manifest['outputs'])

    def test_rerun_is_reproducible(self):
        """Test that a rerun with the same flags reproduces the run log"""
        run('train', '--model', 'mlp:4,8,3', '--data', DATA, '--epochs', '2', '--metric-probes', '2',
            '--lr', '0.05', '--batch', '16', '--htr-gamma', '0', '--out', str(self.out))
        self.assertEqual(
            without_timing(RunLog.from_csv(self.out / 'runlog.csv')),
            without_timing(RunLog.from_csv(self.run_dir / 'runlog.csv')),
        )

    def test_regularized_run_with_baseline(self):
        """Test a middle-layer regularized run reporting its cost against the plain run"""
        run('train', '--model', 'mlp:4,8,3', '--data', DATA, '--epochs', '2', '--metric-probes', '0',
            '--lr', '0.05', '--batch', '16', '--htr-gamma', '0.01', '--htr-freq', '2', '--htr-layers', '1',
            '--baseline', str(self.run_dir / 'runlog.csv'), '--export-data', '--out', str(self.out))
        manifest = self.manifest()
        self.assertGreater(manifest['summary']['wall_clock_ratio']['mean'], 0.0)
        self.assertIn('train.csv', manifest['outputs'])
        self.assertEqual(len((self.out / 'train.csv').read_text().splitlines()), 1 + 60)

    def test_missing_data_is_usage_error(self):
        """Test that omitting --data exits with status 2"""
        with self.assertRaises(SystemExit) as ctx:
            TrainCommand(stdout=StringIO(), stderr=StringIO()).run_from_argv(
                ['manage.py', 'train', '--model', 'mlp:4,8,3', '--out', str(self.out)]
            )
        self.assertEqual(ctx.exception.code, 2)

    def test_unknown_model(self):
        """Test that an unknown architecture is rejected as bad input"""
        with self.assertRaises(CommandError) as ctx:
            run('train', '--model', 'resnet:4,3', '--data', DATA, '--out', str(self.out))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_invalid_config(self):
        """Test that a non-positive learning rate is rejected"""
        with self.assertRaises(CommandError) as ctx:
            run('train', '--model', 'mlp:4,8,3', '--data', DATA, '--lr', '0', '--out', str(self.out))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('lr', str(ctx.exception))

    def test_data_must_fit_model(self):
        """Test that blobs of the wrong dimension are rejected"""
        with self.assertRaises(CommandError) as ctx:
            run('train', '--model', 'mlp:5,8,3', '--data', DATA, '--epochs', '0', '--out', str(self.out))
        self.assertEqual(ctx.exception.returncode, 2)


class SpectrumCommandTest(CommandTestCase):
    def spectrum(self, *extra):
        run('spectrum', '--ckpt', self.ckpt, '--data', DATA, '--lanczos-m', '20', '--grid-k', '256',
            '--probes', '2', '--out', str(self.out), *extra)
        return json.loads((self.out / 'index.json').read_text())

    def test_full_scope(self):
        """Test that the full scope writes exactly one density"""
        index = self.spectrum()
        self.assertEqual(sorted(p.name for p in self.out.glob('density_*.csv')), ['density_hessian_full.csv'])
        entry = index['densities'][0]
        self.assertGreaterEqual(entry['lambda_max'], entry['lambda_min'])
        self.assertAlmostEqual(entry['density']['mass'], 1.0, delta=0.05)

    def test_layer_scopes(self):
        """Test that the layers scope writes the full density plus one per layer"""
        index = self.spectrum('--scope', 'layers', '--operator', 'hessian,g')
        self.assertEqual(len(index['densities']), 2 * 3)
        self.assertTrue((self.out / 'density_g_layer1.csv').exists())
        self.assertEqual(self.manifest()['command'], 'spectrum')

    def test_single_layer(self):
        """Test layer:K and an out-of-range K"""
        index = self.spectrum('--scope', 'layer:0')
        self.assertEqual(index['densities'][0]['layer_name'], 'fc0')
        with self.assertRaises(CommandError) as ctx:
            self.spectrum('--scope', 'layer:7')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_invalid_kappa(self):
        """Test that a broadening factor of 1 is rejected"""
        with self.assertRaises(CommandError) as ctx:
            self.spectrum('--kappa', '1.0')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_hessian_equals_gauss_newton_for_linear_model(self):
        """Test that Hessian and Gauss-Newton densities coincide for a linear classifier"""
        params, registry = build(ModelSpec.mlp([4, 3]), seed=2)
        path = self.out / 'linear.hlns'
        save_checkpoint(
            Checkpoint(registry.spec, params, torch.zeros(params.dim, dtype=params.values.dtype), 0, 2,
                       registry.initial_running_stats()),
            path,
        )
        run('spectrum', '--ckpt', str(path), '--data', DATA, '--operator', 'hessian,g', '--lanczos-m', '15',
            '--probes', '2', '--out', str(self.out))
        hessian = read_density(self.out / 'density_hessian_full.csv')
        gauss_newton = read_density(self.out / 'density_g_full.csv')
        self.assertLess(wasserstein1(hessian, gauss_newton), 1e-3)


class TraceCommandTest(CommandTestCase):
    def test_single_checkpoint(self):
        """Test that one checkpoint with the full scope gives one row"""
        run('trace', '--ckpt', self.ckpt, '--data', DATA, '--probes', '10', '--out', str(self.out))
        header, rows = read_rows(self.out / 'trace.csv')
        self.assertEqual(header[:5], ['checkpoint', 'epoch', 'scope', 'layer_name', 'trace'])
        self.assertEqual(len(rows), 1)

    def test_json_records(self):
        """Test that trace.json holds one estimate record per checkpoint and scope, matching the CSV"""
        run('trace', '--ckpt-dir', str(self.run_dir / 'checkpoints'), '--data', DATA, '--probes', '6',
            '--dist', 'rademacher', '--scope', 'layers', '--seed', '9', '--out', str(self.out))
        records = json.loads((self.out / 'trace.json').read_text())
        _, rows = read_rows(self.out / 'trace.csv')
        self.assertEqual(len(records), len(rows))
        self.assertEqual(len(records), 2 * 4)
        for record, row in zip(records, rows):
            self.assertEqual({'mean', 'stderr', 'n', 'distribution', 'seed'} - set(record), set())
            self.assertEqual((record['checkpoint'], record['scope']), (row[0], row[2]))
            self.assertEqual(record['mean'], float(row[4]))
            self.assertEqual((record['n'], record['distribution'], record['seed']), (6, 'rademacher', 9))
        self.assertIn('trace.json', self.manifest()['outputs'])

    def test_checkpoint_directory(self):
        """Test that a checkpoint directory yields one row per checkpoint in epoch order"""
        run('trace', '--ckpt-dir', str(self.run_dir / 'checkpoints'), '--data', DATA, '--probes', '5',
            '--dist', 'rademacher', '--out', str(self.out))
        _, rows = read_rows(self.out / 'trace.csv')
        self.assertEqual([row[1] for row in rows], ['1', '2'])

    def test_layer_sum_agrees_with_full(self):
        """Test that the sum of layer traces agrees with the full trace within the combined error"""
        run('trace', '--ckpt', self.ckpt, '--data', DATA, '--probes', '200', '--dist', 'rademacher',
            '--scope', 'layers', '--out', str(self.out))
        _, rows = read_rows(self.out / 'trace.csv')
        by_scope = {row[2]: (float(row[4]), float(row[5])) for row in rows}
        self.assertEqual(set(by_scope), {'full', 'layer0', 'layer1', 'layer_sum'})
        (full, full_err), (total, total_err) = by_scope['full'], by_scope['layer_sum']
        self.assertLessEqual(abs(full - total), 5 * np.hypot(full_err, total_err) + 1e-12)

    def test_empty_directory(self):
        """Test that a directory without checkpoints is an error"""
        with self.assertRaises(CommandError):
            run('trace', '--ckpt-dir', str(self.out), '--data', DATA, '--out', str(self.out))


class CompareCommandTest(CommandTestCase):
    def compare(self, metric):
        run('compare', '--ckpt', self.ckpt, '--data', DATA, '--metric', metric, '--lanczos-m', '20',
            '--grid-k', '256', '--probes', '2', '--out', str(self.out))

    def test_both_metrics(self):
        """Test that both distance columns are written and nonnegative"""
        self.compare('both')
        header, rows = read_rows(self.out / 'distances.csv')
        self.assertEqual(header, ['layer', 'name', 'wasserstein', 'js'])
        self.assertEqual(len(rows), 2)
        for row in rows:
            self.assertGreaterEqual(float(row[2]), 0.0)
            self.assertGreaterEqual(float(row[3]), 0.0)
        summary = json.loads((self.out / 'summary.json').read_text())
        self.assertIn(summary['argmin_wasserstein'], (0, 1))
        self.assertIn(summary['argmin_js'], (0, 1))
        outliers = json.loads((self.out / 'outliers.json').read_text())
        self.assertEqual(set(outliers), {'full', 'fc0', 'fc1'})

    def test_single_metric(self):
        """Test that a single metric writes only its column"""
        self.compare('js')
        header, _ = read_rows(self.out / 'distances.csv')
        self.assertEqual(header, ['layer', 'name', 'js'])


class DeltasCommandTest(CommandTestCase):
    def test_export(self):
        """Test that δ rows are capped by --max-samples and purity is a fraction"""
        run('deltas', '--ckpt', self.ckpt, '--data', DATA, '--max-samples', '25', '--out', str(self.out))
        header, rows = read_rows(self.out / 'deltas.csv')
        self.assertEqual(len(rows), 25)
        self.assertEqual(header[0], 'label')
        purity = json.loads((self.out / 'purity.json').read_text())
        self.assertGreaterEqual(purity['purity'], 0.0)
        self.assertLessEqual(purity['purity'], 1.0)

    def test_all_samples_when_fewer(self):
        """Test that small splits export every sample"""
        run('deltas', '--ckpt', self.ckpt, '--data', DATA, '--split', 'test', '--scope', 'layer:1',
            '--out', str(self.out))
        _, rows = read_rows(self.out / 'deltas.csv')
        self.assertEqual(len(rows), 15)
        self.assertEqual(len(rows[0]), 1 + 8 * 3 + 3)

    def test_layers_scope_rejected(self):
        """Test that the deltas command only takes full or layer:K"""
        with self.assertRaises(CommandError):
            run('deltas', '--ckpt', self.ckpt, '--data', DATA, '--scope', 'layers', '--out', str(self.out))


class OracleCommandTest(CommandTestCase):
    def test_dense_outputs(self):
        """Test the dense oracle traces and eigenvalues"""
        run('oracle', '--ckpt', self.ckpt, '--data', DATA, '--out', str(self.out))
        report = json.loads((self.out / 'oracle.json').read_text())
        self.assertEqual(report['dim'], 4 * 8 + 8 + 8 * 3 + 3)
        self.assertAlmostEqual(report['trace'], report['layer_trace_sum'], delta=1e-10 * max(1.0, abs(report['trace'])))
        self.assertLess(report['autograd_max_abs_diff'], 1e-8)
        self.assertGreaterEqual(report['lambda_max'], report['lambda_min'])
        header, rows = read_rows(self.out / 'eigenvalues.csv')
        self.assertEqual(header, ['index', 'hessian', 'gauss_newton'])
        self.assertEqual(len(rows), report['dim'])
        self.assertGreaterEqual(min(float(row[2]) for row in rows), -1e-10)

    def test_refuses_large_models(self):
        """Test that models above the dense limit exit with status 3"""
        with self.assertRaises(SystemExit) as ctx:
            OracleCommand(stdout=StringIO(), stderr=StringIO()).run_from_argv(
                ['manage.py', 'oracle', '--ckpt', self.ckpt, '--data', DATA, '--max-dim', '10', '--out', str(self.out)]
            )
        self.assertEqual(ctx.exception.code, 3)


class SeedFallbackTest(CommandTestCase):
    def test_seed_from_settings(self):
        """Test that commands fall back to the configured seed"""
        with override_settings(HESSLENS={**settings.HESSLENS, 'SEED': 7}):
            run('deltas', '--ckpt', self.ckpt, '--data', DATA, '--max-samples', '10', '--out', str(self.out))
        self.assertEqual(self.manifest()['seed'], 7)


class ArtifactsTest(SimpleTestCase):
    def test_cells(self):
        """Test full-precision float cells and blank missing values"""
        self.assertEqual(cell(0.1), '0.10000000000000001')
        self.assertEqual(cell(None), '')
        self.assertEqual(cell(3), 3)

    def test_content_hash(self):
        """Test that file hashes follow content and source strings hash stably"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'a.bin'
            path.write_bytes(b'abc')
            first = content_hash(path)
            path.write_bytes(b'abd')
            self.assertNotEqual(first, content_hash(path))
        self.assertEqual(content_hash(DATA), content_hash(DATA))

    def test_manifest(self):
        """Test the manifest layout"""
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            manifest = RunManifest(command='oracle', config={'x': 1}, seed=3)
            manifest.add_output(out / 'b.csv', out)
            manifest.add_output(out / 'a.csv', out)
            data = json.loads(manifest.write(out).read_text())
        self.assertEqual(data['outputs'], ['a.csv', 'b.csv'])
        self.assertEqual(data['seed'], 3)
        self.assertIn('created', data)
