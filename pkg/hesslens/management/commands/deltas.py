from hesslens.artifacts import write_json
from specanalysis.deltas import cluster_purity, extract_deltas

from ._options import HessLensCommand, defaults, parse_scope, scope_label


class Command(HessLensCommand):
    help = 'Export the per-sample δ vectors of the Gauss-Newton factorization and their class purity'

    def add_arguments(self, parser):
        self.add_checkpoint_argument(parser)
        self.add_data_argument(parser)
        parser.add_argument('--scope', default='full', help='full or layer:K (default: full)')
        parser.add_argument(
            '--max-samples',
            type=int,
            default=defaults()['DELTA_SAMPLES'],
            help='Largest number of samples to export (default: 512)'
        )
        self.add_common_arguments(parser)

    def run(self, **options):
        checkpoint, registry, probe = self.load_analysis_inputs(options, probe_size=options['max_samples'])
        (layer,) = parse_scope(options['scope'], registry.num_layers, allow_layers=False)
        out = self.out_dir(options)
        manifest = self.manifest('deltas', options)

        self.stdout.write(f'Extracting δ vectors for {len(probe)} samples ({scope_label(layer)})...')
        deltas = extract_deltas(checkpoint.params, registry, probe, layer=layer, running=checkpoint.running)
        purity = cluster_purity(deltas)

        manifest.add_output(deltas.to_csv(out / 'deltas.csv'), out)
        summary = {
            'purity': purity,
            'samples': len(deltas),
            'dim': deltas.dim,
            'num_classes': deltas.num_classes,
            'scope': scope_label(layer),
            'layer_name': registry.names[layer] if layer is not None else None,
        }
        manifest.add_output(write_json(out / 'purity.json', summary), out)
        manifest.summary = summary
        manifest.write(out)
        self.done(f'✅ Cluster purity {purity:.3f} over {len(deltas)} samples')
