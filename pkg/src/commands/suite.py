import argparse

from commands.utils import report_templates
from commands.utils.analysis import claims_over_seeds, export_loss_curves
from commands.utils.config import train_config
from commands.utils.data_synth import load_benchmark
from commands.utils.exceptions import EmptyPopulationError
from commands.utils.losses import Variant
from commands.utils.run_directory import RunManifest, git_revision, threshold_chart, unique_run_dir, write_json
from commands.utils.trainer import head_distance_correlation, run_ablation_suite, run_lambda_sweep


class Suite:
    """Ablation, lambda sweep and threshold robustness over several seeds"""

    def __init__(self, cli):
        self.cli = cli

        parser = cli.add_command('suite', self.suite, 'Run the ablation suite and the lambda_hr sweep')
        parser.add_argument('--bench', required=True, help='Benchmark directory')
        parser.add_argument('--seeds', type=int, help='Seeds per configuration')
        parser.add_argument('--workers', type=int, help='Concurrent runs')
        parser.add_argument('--lambdas', type=float, nargs='+', help='lambda_hr values of the sweep')
        parser.add_argument('--out', default='runs/suite', help='Output directory')

    def suite(self, args: argparse.Namespace) -> int:
        """
        Writes ablation.csv, lambda_sweep.csv, thresholds.csv/.svg, loss_curves.csv/.svg, claims.csv,
        correlation.json and one run directory per experiment under runs/

        Parameters
        ----------
        args (argparse.Namespace): Parsed arguments
        """

        settings = self.cli.config['suite']
        num_seeds = args.seeds or int(settings.get('seeds', 3))
        workers = args.workers or int(settings.get('workers', 1))
        lambdas = args.lambdas or settings.get('lambdas', [1.0, 0.5, 0.1])

        bundle = load_benchmark(args.bench)
        config = train_config(self.cli.config)

        out_dir = unique_run_dir(args.out)
        self.cli.log.attach_file(out_dir, self.cli.config['log'].get('file', 'rpf.log'))
        manifest = RunManifest(command='suite', config_path=args.config,
                               config={**self.cli.config, 'train': config.to_dict()}, seed=config.seed,
                               output_dir=str(out_dir), git_revision=git_revision())
        manifest.write()

        cache = {}
        ablation = run_ablation_suite(bundle, config, num_seeds, workers, out_dir / 'runs' / 'ablation', cache)
        ablation.table.to_csv(out_dir / 'ablation.csv', index=False)

        sweep = run_lambda_sweep(bundle, config, lambdas, num_seeds, workers, out_dir / 'runs' / 'lambda', cache)
        sweep.table.to_csv(out_dir / 'lambda_sweep.csv', index=False)

        thresholds = ablation.threshold_table()
        thresholds.to_csv(out_dir / 'thresholds.csv', index=False)
        threshold_chart({label: rows for label, rows in thresholds.groupby('label', sort=False)},
                        out_dir / 'thresholds.svg')

        records = {}
        for variant in (Variant.RPF, Variant.LPFT):
            runs = [result.record for (v, _), result in ablation.successful().items() if v == variant]
            if runs:
                records[variant.value] = runs
        if records:
            export_loss_curves(records, out_dir, config.ema_factor)

        pairs = ablation.matched_pairs(Variant.RPF, Variant.LPFT)
        claims = claims_over_seeds(pairs)
        claims.to_csv(out_dir / 'claims.csv', index=False)

        try:
            correlation = head_distance_correlation(pairs)
            correlation.table.to_csv(out_dir / 'correlation.csv', index=False)
            write_json(out_dir / 'correlation.json', {'rho_imp1': correlation.rho_imp1,
                                                      'rho_imp2': correlation.rho_imp2})
        except EmptyPopulationError as e:
            self.cli.logger.warning(f'Skipping the head distance correlation: {e}')

        failed = (ablation.table['status'] == 'FAILED').any() or (sweep.table['status'] == 'FAILED').any()
        manifest.finish('partial' if failed else 'ok')
        manifest.write()

        print(report_templates.success(f'Suite written to {out_dir}'))
        print(report_templates.table('Ablation:', ablation.table))
        print(report_templates.table('lambda_hr sweep:', sweep.table))
        if len(claims):
            print(report_templates.table('RPF vs LPFT claims:', claims))
        if failed:
            print(report_templates.error_warning('Some runs failed, their rows are marked FAILED'))
        return 0


def setup(cli):
    """
    Add the command to the CLI on discovery

    Parameters
    ----------
    cli (Cli): CLI instance
    """

    cli.add_group(Suite(cli))
