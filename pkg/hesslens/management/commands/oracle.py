import torch

from hesslens.artifacts import write_csv, write_json, write_matrix_csv
from hesslens.exceptions import DenseLimitError
from hessops.operators import hessian_op, materialize_dense
from hessops.oracles import autograd_hessian, explicit_gauss_newton

from ._options import HessLensCommand, defaults


class Command(HessLensCommand):
    help = 'Dense Hessian and Gauss-Newton matrices of a small checkpoint, for verification'

    def add_arguments(self, parser):
        self.add_checkpoint_argument(parser)
        self.add_data_argument(parser)
        parser.add_argument(
            '--max-dim',
            type=int,
            default=defaults()['DENSE_LIMIT'],
            help='Refuse models with more parameters than this (default: 5000)'
        )
        self.add_common_arguments(parser)

    def run(self, **options):
        checkpoint, registry, probe = self.load_analysis_inputs(options)
        if registry.dim > options['max_dim']:
            raise DenseLimitError(registry.dim, options['max_dim'])
        out = self.out_dir(options)
        manifest = self.manifest('oracle', options)
        params, running = checkpoint.params, checkpoint.running

        self.stdout.write(f'Materializing {registry.dim}x{registry.dim} Hessian and Gauss-Newton matrices...')
        hessian = materialize_dense(hessian_op(params, registry, probe, running=running), options['max_dim'])
        reference = autograd_hessian(params, registry, probe, running=running)
        gauss_newton = explicit_gauss_newton(params, registry, probe, running=running)
        hessian_eigs = hessian.eigenvalues()
        gauss_newton_eigs = torch.linalg.eigvalsh(gauss_newton)

        layers = []
        for layer, segment in enumerate(params.layer_map):
            block = hessian.block(segment)
            layers.append({
                'layer': layer,
                'name': segment.name,
                'dim': segment.length,
                'trace': float(torch.trace(block)),
                'gauss_newton_trace': float(torch.trace(gauss_newton[segment.slice, segment.slice])),
                'lambda_max': float(torch.linalg.eigvalsh(block).max()),
            })
        report = {
            'dim': registry.dim,
            'probe_set_size': len(probe),
            'checkpoint_epoch': checkpoint.epoch,
            'trace': float(torch.trace(hessian.matrix)),
            'layer_trace_sum': sum(entry['trace'] for entry in layers),
            'gauss_newton_trace': float(torch.trace(gauss_newton)),
            'lambda_max': float(hessian_eigs.max()),
            'lambda_min': float(hessian_eigs.min()),
            'gauss_newton_lambda_max': float(gauss_newton_eigs.max()),
            'asymmetry': hessian.asymmetry,
            'autograd_max_abs_diff': float((hessian.matrix - reference).abs().max()),
            'layers': layers,
        }

        outputs = [
            write_json(out / 'oracle.json', report),
            write_matrix_csv(out / 'hessian.csv', hessian.matrix),
            write_matrix_csv(out / 'gauss_newton.csv', gauss_newton),
            write_csv(
                out / 'eigenvalues.csv',
                ['index', 'hessian', 'gauss_newton'],
                zip(range(registry.dim), hessian_eigs.tolist(), gauss_newton_eigs.tolist()),
            ),
        ]
        for path in outputs:
            manifest.add_output(path, out)
        manifest.summary = {key: report[key] for key in ('dim', 'trace', 'lambda_max', 'lambda_min')}
        manifest.write(out)
        self.done(
            f'✅ Oracle written to {out}\n'
            f'   - Trace: {report["trace"]:.6g} (sum over layers {report["layer_trace_sum"]:.6g})\n'
            f'   - λ_max: {report["lambda_max"]:.6g}, λ_min: {report["lambda_min"]:.6g}'
        )
