from django.conf import settings

from dataio.datasets import export_csv
from hesslens.exceptions import ConfigurationError
from htrtrain.config import TrainConfig
from htrtrain.loop import RunLog, train, wall_clock_ratio
from nnmodels.specs import parse_model_spec

from ._options import HessLensCommand


class Command(HessLensCommand):
    help = 'Train a small classifier with SGD, optionally with layerwise Hessian trace regularization'

    def add_arguments(self, parser):
        parser.add_argument('--model', required=True, help='Model spec, e.g. mlp:16,32,32,3 or mlp+bn:16,32,3')
        self.add_data_argument(parser)
        parser.add_argument('--epochs', type=int, help='Number of epochs (default: 10)')
        parser.add_argument('--lr', type=float, help='Learning rate (default: 1e-2)')
        parser.add_argument('--momentum', type=float, help='Momentum (default: 0.9)')
        parser.add_argument('--l2', type=float, help='L2 weight decay (default: 1e-3)')
        parser.add_argument('--batch', type=int, dest='batch_size', help='Minibatch size (default: 64)')
        parser.add_argument('--htr-gamma', type=float, help='Trace penalty coefficient (default: 0)')
        parser.add_argument('--htr-freq', type=int, dest='htr_frequency', help='Steps between penalty applications; 0 disables')
        parser.add_argument('--htr-layers', help='Penalized layers: all, middle or i,j,k (default: all)')
        parser.add_argument('--htr-probes', type=int, help='Rademacher probes per penalty step (default: 1)')
        parser.add_argument('--metric-probes', type=int, help='Hutchinson probes per epoch metric; 0 skips traces')
        parser.add_argument('--checkpoint-every', type=int, help='Epochs between checkpoints; 0 writes only the final one')
        parser.add_argument(
            '--parallel-metrics',
            action='store_true',
            help='Compute epoch metrics on a background thread'
        )
        parser.add_argument('--export-data', action='store_true', help='Also write the training split to train.csv')
        parser.add_argument('--baseline', help='runlog.csv of a plain run to report the wall-clock ratio against')
        self.add_common_arguments(parser, split=False)

    def run(self, **options):
        spec = parse_model_spec(options['model'])
        config = TrainConfig.from_options(
            epochs=options['epochs'],
            lr=options['lr'],
            momentum=options['momentum'],
            l2=options['l2'],
            batch_size=options['batch_size'],
            seed=options['seed'],
            htr_gamma=options['htr_gamma'],
            htr_frequency=options['htr_frequency'],
            htr_layers=options['htr_layers'],
            htr_probes=options['htr_probes'],
            metric_probes=options['metric_probes'],
            metric_lanczos_steps=settings.HESSLENS['LAMBDA_STEPS'],
            probe_set_size=settings.HESSLENS['PROBE_SET_SIZE'],
            checkpoint_every=options['checkpoint_every'],
            strict_determinism=not options['parallel_metrics'],
        )
        if config.htr_gamma > 0 and config.htr_frequency == 0:
            self.stdout.write(self.style.WARNING('--htr-gamma is set but --htr-freq is 0; no penalty will be applied'))

        train_ds, test_ds = self.load_data(options['data'], spec)
        out = self.out_dir(options)
        self.stdout.write(
            f'Training {spec.architecture} on {len(train_ds)} samples for {config.epochs} epochs '
            f'(config {config.config_hash()})...'
        )
        result = train(config, spec, train_ds, test_ds, out_dir=out)

        manifest = self.manifest('train', options, config={'model': spec.to_dict(), **config.to_dict()})
        manifest.add_output(out / 'runlog.csv', out)
        manifest.add_output(out / 'final.hlns', out)
        if options['export_data']:
            manifest.add_output(export_csv(train_ds, out / 'train.csv'), out)
        for path in sorted((out / 'checkpoints').glob('*.hlns')):
            manifest.add_output(path, out)
        final = result.run_log.records[-1]
        manifest.summary = {
            'final_train_loss': final['train_loss'],
            'final_test_acc': final['test_acc'],
            'final_lambda_max': final['lambda_max_full'],
            'final_trace': final.get('trace_full'),
        }
        if options['baseline']:
            try:
                mean, stderr = wall_clock_ratio(result.run_log, RunLog.from_csv(options['baseline']))
            except ValueError as exc:
                raise ConfigurationError(f'cannot compare with {options["baseline"]}: {exc}') from exc
            manifest.summary['wall_clock_ratio'] = {'mean': mean, 'stderr': stderr}
            self.stdout.write(f'Wall-clock ratio against baseline: {mean:.3f} ± {stderr:.3f}')
        manifest.write(out)

        self.done(
            f'✅ Training finished!\n'
            f'   - Final train loss: {final["train_loss"]:.4f}\n'
            f'   - Final λ_max: {final["lambda_max_full"]:.4g}\n'
            f'   - Run log: {out / "runlog.csv"}'
        )
