import argparse

from commands.utils import report_templates
from commands.utils.config import train_config
from commands.utils.data_synth import load_benchmark
from commands.utils.losses import Variant
from commands.utils.run_directory import RunManifest, git_revision, unique_run_dir
from commands.utils.trainer import run_experiment


class Train:
    """Run the full pipeline for one variant"""

    def __init__(self, cli):
        self.cli = cli

        parser = cli.add_command('train', self.train, 'Pretrain, probe, fine-tune, evaluate and analyse one variant')
        parser.add_argument('--bench', required=True, help='Benchmark directory written by generate')
        parser.add_argument('--variant', choices=[variant.value for variant in Variant], help='Loss variant')
        parser.add_argument('--seed', type=int, help='Training seed')
        parser.add_argument('--lambda-hr', type=float, dest='lambda_hr', help='Coefficient of the head term')
        parser.add_argument('--trace', action='store_true', help='Record a step-level loss trace')
        parser.add_argument('--out', help='Run directory (default: runs/<variant>-seed<seed>)')

    def train(self, args: argparse.Namespace) -> int:
        """
        Parameters
        ----------
        args (argparse.Namespace): Parsed arguments
        """

        bundle = load_benchmark(args.bench)
        config = train_config(self.cli.config, variant=args.variant, seed=args.seed, lambda_hr=args.lambda_hr,
                              trace_steps=args.trace or None)

        run_dir = unique_run_dir(args.out or f'runs/{config.variant.value}-seed{config.seed}')
        self.cli.log.attach_file(run_dir, self.cli.config['log'].get('file', 'rpf.log'))

        manifest = RunManifest(command='train', config_path=args.config,
                               config={**self.cli.config, 'train': config.to_dict()}, seed=config.seed,
                               output_dir=str(run_dir), git_revision=git_revision())
        manifest.write()

        try:
            result = run_experiment(bundle, config, run_dir)
        except Exception:
            manifest.finish('failed')
            manifest.write()
            raise

        manifest.finish()
        manifest.write()

        report = result.eval_report
        print(report_templates.success(f'Run written to {run_dir}'))
        print(report_templates.key_values(f'{config.variant.value} (seed {config.seed}):', {
            'selected epoch': result.record.selected_epoch,
            'Acc': report.acc_known,
            'H-score': report.best_h_score,
            'threshold': report.best_threshold
        }))
        return 0


def setup(cli):
    """
    Add the command to the CLI on discovery

    Parameters
    ----------
    cli (Cli): CLI instance
    """

    cli.add_group(Train(cli))
