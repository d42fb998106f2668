from hesslens.artifacts import write_json
from htrtrain.serializers import SpectrumOptionsSerializer, validated
from hessops.operators import build_operator
from spectral.density import slq_density
from spectral.lanczos import extreme_eigenvalues

from ._options import HessLensCommand, defaults, parse_scope, scope_label


class Command(HessLensCommand):
    help = 'Estimate spectral densities of the Hessian, Gauss-Newton or residual term of a checkpoint'

    def add_arguments(self, parser):
        self.add_checkpoint_argument(parser)
        self.add_data_argument(parser)
        parser.add_argument(
            '--operator',
            default='hessian',
            help='hessian, g, h or a comma-separated list such as hessian,g (default: hessian)'
        )
        parser.add_argument('--scope', default='full', help='full, layers or layer:K (default: full)')
        self.add_density_arguments(parser)
        self.add_common_arguments(parser)

    def run(self, **options):
        spectrum = validated(SpectrumOptionsSerializer, {
            'operator': options['operator'],
            'scope': options['scope'],
            'lanczos_m': options['lanczos_m'],
            'grid_k': options['grid_k'],
            'kappa': options['kappa'],
            'probes': options['probes'],
        })
        checkpoint, registry, probe = self.load_analysis_inputs(options)
        scopes = parse_scope(spectrum['scope'], registry.num_layers)
        out = self.out_dir(options)
        manifest = self.manifest('spectrum', options)

        entries = []
        for layer in scopes:
            for name in spectrum['operator']:
                op = build_operator(name, checkpoint.params, registry, probe, layer=layer, running=checkpoint.running)
                self.stdout.write(f'Estimating {name} density for {scope_label(layer)} (dimension {op.dim})...')
                density = slq_density(
                    op,
                    M=spectrum['lanczos_m'],
                    K=spectrum['grid_k'],
                    kappa=spectrum['kappa'],
                    num_probes=spectrum['probes'],
                    seed=options['seed'],
                )
                low, high = extreme_eigenvalues(op, defaults()['LAMBDA_STEPS'], options['seed'])
                path = density.to_csv(out / f'density_{name}_{scope_label(layer)}.csv')
                manifest.add_output(path, out)
                entries.append({
                    'operator': name,
                    'scope': scope_label(layer),
                    'layer': layer,
                    'layer_name': registry.names[layer] if layer is not None else None,
                    'dim': op.dim,
                    'file': path.name,
                    'lambda_max': high,
                    'lambda_min': low,
                    'density': density.metadata(),
                })

        index = {'checkpoint_epoch': checkpoint.epoch, 'probe_set_size': len(probe), 'densities': entries}
        manifest.add_output(write_json(out / 'index.json', index), out)
        manifest.summary = {f'{e["operator"]}/{e["scope"]}': e['lambda_max'] for e in entries}
        manifest.write(out)
        self.done(f'✅ Wrote {len(entries)} densities to {out}')
