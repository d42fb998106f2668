from django.conf import settings

from hesslens.artifacts import write_json
from hessops.operators import hessian_op, layer_hessian_op
from nnmodels.networks import middle_band
from specanalysis.distances import layer_distance_table
from specanalysis.outliers import count_outliers
from spectral.density import slq_density

from ._options import HessLensCommand

METRICS = ('wasserstein', 'js', 'both')


class Command(HessLensCommand):
    help = 'Compare every layer Hessian density with the full-network density and count outlier eigenvalues'

    def add_arguments(self, parser):
        self.add_checkpoint_argument(parser)
        self.add_data_argument(parser)
        parser.add_argument('--metric', choices=METRICS, default='both', help='Distance column(s) to report')
        parser.add_argument(
            '--raw-wasserstein',
            action='store_true',
            help='Report unit-mass Wasserstein distances instead of dividing by the grid width'
        )
        self.add_density_arguments(parser)
        self.add_common_arguments(parser)

    def run(self, **options):
        checkpoint, registry, probe = self.load_analysis_inputs(options)
        out = self.out_dir(options)
        manifest = self.manifest('compare', options)
        params, running = checkpoint.params, checkpoint.running

        self.stdout.write(f'Estimating the full density (dimension {registry.dim})...')
        full = self.density(hessian_op(params, registry, probe, running=running), options)
        layers = []
        for layer in range(registry.num_layers):
            self.stdout.write(f'Estimating the density of {registry.names[layer]}...')
            layers.append(self.density(layer_hessian_op(params, registry, layer, probe, running=running), options))

        table = layer_distance_table(
            layers,
            full,
            names=registry.names,
            grid_points=settings.HESSLENS['DISTANCE_GRID_POINTS'],
            normalize_width=not options['raw_wasserstein'],
        )
        columns = ('wasserstein', 'js') if options['metric'] == 'both' else (options['metric'],)
        manifest.add_output(table.to_csv(out / 'distances.csv', metrics=columns), out)

        outliers = {'full': self.outliers(full, checkpoint.spec.num_classes)}
        for name, density in zip(registry.names, layers):
            outliers[name] = self.outliers(density, checkpoint.spec.num_classes)
        manifest.add_output(write_json(out / 'outliers.json', outliers), out)

        band = middle_band(registry.num_layers)
        summary = {
            'metric': options['metric'],
            'middle_band': band,
            'normalization': table.normalization,
            'full_outliers': outliers['full']['count'],
            'expected_outliers': checkpoint.spec.num_classes,
        }
        if 'wasserstein' in columns:
            summary['argmin_wasserstein'] = table.argmin_wasserstein
            summary['argmin_in_middle'] = table.argmin_in_middle(registry.num_layers)
        if 'js' in columns:
            summary['argmin_js'] = table.argmin_js
        manifest.add_output(write_json(out / 'summary.json', summary), out)
        manifest.summary = summary
        manifest.write(out)

        closest = table.argmin_wasserstein if 'wasserstein' in columns else table.argmin_js
        self.done(
            f'✅ Closest layer to the full spectrum: {registry.names[closest]} (index {closest})\n'
            f'   - Outliers in the full density: {outliers["full"]["count"]} '
            f'(classes: {checkpoint.spec.num_classes})'
        )

    def density(self, op, options):
        return slq_density(
            op,
            M=options['lanczos_m'],
            K=options['grid_k'],
            kappa=options['kappa'],
            num_probes=options['probes'],
            seed=options['seed'],
        )

    def outliers(self, density, num_classes):
        report = count_outliers(
            density,
            expected_classes=num_classes,
            bulk_mass=settings.HESSLENS['BULK_MASS'],
            prominence=settings.HESSLENS['OUTLIER_PROMINENCE'],
            mode_fraction=settings.HESSLENS['OUTLIER_MODE_FRACTION'],
        )
        return report.to_dict()
