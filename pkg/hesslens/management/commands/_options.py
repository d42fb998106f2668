"""Flags, input loading and error translation shared by the hesslens commands."""
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from dataio.datasets import Dataset, probe_set
from dataio.sources import load_source
from hesslens.artifacts import RunManifest
from hesslens.exceptions import ConfigurationError, DenseLimitError, HessLensError
from htrtrain.checkpoints import load_checkpoint

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_REFUSED = 3


def defaults():
    return settings.HESSLENS


def parse_scope(text, num_layers, allow_layers=True):
    """``full`` → [None]; ``layers`` → [None, 0, ..., L−1]; ``layer:K`` → [K]."""
    if text == 'full':
        return [None]
    if text == 'layers' and allow_layers:
        return [None] + list(range(num_layers))
    if text.startswith('layer:'):
        try:
            layer = int(text[len('layer:'):])
        except ValueError as exc:
            raise ConfigurationError(f'bad scope {text!r}; use layer:K') from exc
        if not 0 <= layer < num_layers:
            raise ConfigurationError(f'layer {layer} outside [0, {num_layers})')
        return [layer]
    choices = 'full, layers or layer:K' if allow_layers else 'full or layer:K'
    raise ConfigurationError(f'bad scope {text!r}; use {choices}')


def scope_label(layer):
    return 'full' if layer is None else f'layer{layer}'


def fit_inputs(dataset, spec):
    """Flatten image inputs for MLPs and check the sample shape against the model."""
    if dataset is None:
        return None
    inputs = dataset.inputs
    if spec.architecture != 'lenet' and inputs.dim() > 2:
        inputs = inputs.reshape(inputs.shape[0], -1)
    if tuple(inputs.shape[1:]) != tuple(spec.input_shape):
        raise ConfigurationError(
            f'{dataset.name} samples have shape {tuple(inputs.shape[1:])}, model expects {tuple(spec.input_shape)}'
        )
    if dataset.num_classes > spec.num_classes:
        raise ConfigurationError(f'{dataset.name} has {dataset.num_classes} classes, model has {spec.num_classes}')
    return Dataset(inputs, dataset.labels, spec.num_classes, dataset.name)


class HessLensCommand(BaseCommand):
    """
    Base for the toolkit commands.

    Subclasses implement ``run(**options)``. Toolkit errors become
    ``CommandError`` with exit status 2 for bad input, 3 for refusals and
    1 for everything else.
    """

    def handle(self, *args, **options):
        if options.get('seed') is None:
            options['seed'] = defaults()['SEED']
        try:
            self.run(**options)
        except DenseLimitError as exc:
            raise CommandError(str(exc), returncode=EXIT_REFUSED) from exc
        except ConfigurationError as exc:
            raise CommandError(str(exc), returncode=EXIT_USAGE) from exc
        except (HessLensError, OSError) as exc:
            raise CommandError(str(exc), returncode=EXIT_RUNTIME) from exc

    def run(self, **options):
        raise NotImplementedError('subclasses of HessLensCommand must provide a run() method')

    # Flags

    def add_data_argument(self, parser):
        parser.add_argument(
            '--data',
            required=True,
            help='Data source: blobs:C=3,n=500,dim=16,sep=6[,seed=S,test=N], an IDX directory or idx:IMAGES,LABELS'
        )

    def add_checkpoint_argument(self, parser):
        parser.add_argument('--ckpt', required=True, help='Checkpoint file (.hlns)')

    def add_common_arguments(self, parser, split=True):
        parser.add_argument('--seed', type=int, default=None, help='Seed (default: HESSLENS_SEED, else 0)')
        parser.add_argument('--out', required=True, help='Output directory')
        if split:
            parser.add_argument(
                '--split',
                choices=['train', 'test'],
                default='train',
                help='Split backing the probe set (default: train)'
            )

    def add_density_arguments(self, parser):
        parser.add_argument('--lanczos-m', type=int, default=defaults()['LANCZOS_STEPS'], help='Lanczos steps per probe')
        parser.add_argument('--grid-k', type=int, default=defaults()['GRID_POINTS'], help='Density grid points')
        parser.add_argument('--kappa', type=float, default=defaults()['KAPPA'], help='Broadening factor (> 1)')
        parser.add_argument('--probes', type=int, default=defaults()['SLQ_PROBES'], help='SLQ probe vectors')

    # Inputs

    def load_data(self, source, spec):
        train, test = load_source(source, num_classes=spec.num_classes)
        return fit_inputs(train, spec), fit_inputs(test, spec)

    def load_analysis_inputs(self, options, probe_size=None, checkpoint=None):
        """Checkpoint, model registry and the probe set of the requested split."""
        checkpoint = checkpoint or load_checkpoint(options['ckpt'])
        train, test = self.load_data(options['data'], checkpoint.spec)
        dataset = train if options.get('split', 'train') == 'train' else test
        if dataset is None:
            raise ConfigurationError(f'data source {options["data"]!r} has no test split')
        size = probe_size if probe_size is not None else defaults()['PROBE_SET_SIZE']
        probe = probe_set(dataset, size=size, seed=options['seed'])
        logger.info('probe set of %d %s samples from %s', len(probe), options.get('split', 'train'), options['data'])
        return checkpoint, checkpoint.registry, probe

    def manifest(self, name, options, config=None):
        manifest = RunManifest(command=name, config=config or self.resolved(options), seed=options['seed'])
        manifest.add_input('data', options['data'])
        if options.get('ckpt'):
            manifest.add_input('ckpt', options['ckpt'])
        return manifest

    def resolved(self, options):
        skip = {'verbosity', 'settings', 'pythonpath', 'traceback', 'no_color', 'force_color', 'skip_checks'}
        return {
            key: value for key, value in sorted(options.items())
            if key not in skip and isinstance(value, (str, int, float, bool, type(None)))
        }

    def out_dir(self, options):
        path = Path(options['out'])
        path.mkdir(parents=True, exist_ok=True)
        return path

    def done(self, message):
        self.stdout.write(self.style.SUCCESS(message))
