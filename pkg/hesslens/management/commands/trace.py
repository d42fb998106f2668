import math
from pathlib import Path

from hesslens.artifacts import write_csv, write_json
from hesslens.exceptions import ConfigurationError
from hessops.operators import hessian_op, layer_hessian_op
from htrtrain.checkpoints import load_checkpoint
from spectral.trace import DISTRIBUTIONS, TraceEstimate, hutchinson_trace

from ._options import HessLensCommand, defaults, parse_scope, scope_label

COLUMNS = ['checkpoint', 'epoch', 'scope', 'layer_name', 'trace', 'stderr', 'probes', 'distribution']
ROW_FIELDS = ['checkpoint', 'epoch', 'scope', 'layer_name', 'mean', 'stderr', 'n', 'distribution']


class Command(HessLensCommand):
    help = 'Hutchinson trace of the full and layerwise Hessians for one checkpoint or a directory of checkpoints'

    def add_arguments(self, parser):
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument('--ckpt', help='Checkpoint file (.hlns)')
        source.add_argument('--ckpt-dir', help='Directory of checkpoints, processed in epoch order')
        self.add_data_argument(parser)
        parser.add_argument('--probes', type=int, default=defaults()['TRACE_PROBES'], help='Probe vectors (default: 100)')
        parser.add_argument('--dist', choices=DISTRIBUTIONS, default='gaussian', help='Probe distribution')
        parser.add_argument('--scope', choices=['full', 'layers'], default='full', help='full or layers (default: full)')
        self.add_common_arguments(parser)

    def run(self, **options):
        paths = self.checkpoint_paths(options)
        checkpoints = sorted(((load_checkpoint(p), p) for p in paths), key=lambda item: (item[0].epoch, item[1].name))
        out = self.out_dir(options)
        manifest = self.manifest('trace', options)
        if options['ckpt_dir']:
            manifest.add_input('ckpt_dir', options['ckpt_dir'])

        # one probe set for the whole evolution
        first, registry, probe = self.load_analysis_inputs(options, checkpoint=checkpoints[0][0])
        estimates = []
        for checkpoint, path in checkpoints:
            if checkpoint.spec != first.spec:
                raise ConfigurationError(f'{path} holds a different model than {checkpoints[0][1]}')
            self.stdout.write(f'Estimating traces for {path.name} (epoch {checkpoint.epoch})...')
            estimates += self.trace_estimates(checkpoint, path, registry, probe, options)

        rows = [[record[column] for column in ROW_FIELDS] for record in estimates]
        path = write_csv(out / 'trace.csv', COLUMNS, rows)
        manifest.add_output(path, out)
        manifest.add_output(write_json(out / 'trace.json', estimates), out)
        manifest.summary = {'checkpoints': len(checkpoints), 'rows': len(rows)}
        manifest.write(out)
        self.done(f'✅ Wrote {len(rows)} trace estimates to {path}')

    def checkpoint_paths(self, options):
        if options['ckpt']:
            return [Path(options['ckpt'])]
        paths = sorted(Path(options['ckpt_dir']).glob('*.hlns'))
        if not paths:
            raise ConfigurationError(f'no .hlns checkpoints in {options["ckpt_dir"]}')
        return paths

    def trace_estimates(self, checkpoint, path, registry, probe, options):
        """One record per scope: where it was measured plus the TraceEstimate fields."""
        records, layer_sum, layer_var = [], 0.0, 0.0

        def record(scope, name, estimate):
            return dict(checkpoint=path.name, epoch=checkpoint.epoch, scope=scope, layer_name=name,
                        **estimate.to_dict())

        for layer in parse_scope(options['scope'], registry.num_layers):
            if layer is None:
                op = hessian_op(checkpoint.params, registry, probe, running=checkpoint.running)
            else:
                op = layer_hessian_op(checkpoint.params, registry, layer, probe, running=checkpoint.running)
            estimate = hutchinson_trace(op, n=options['probes'], distribution=options['dist'], seed=options['seed'])
            records.append(record(scope_label(layer), registry.names[layer] if layer is not None else '', estimate))
            if layer is not None:
                layer_sum += estimate.mean
                layer_var += estimate.stderr ** 2
        if options['scope'] == 'layers':
            total = TraceEstimate(layer_sum, math.sqrt(layer_var), options['probes'], options['dist'], options['seed'])
            records.append(record('layer_sum', '', total))
        return records
