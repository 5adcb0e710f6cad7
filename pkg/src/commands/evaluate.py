import argparse
from pathlib import Path

from commands.utils import report_templates
from commands.utils.checkpoint import load_checkpoint
from commands.utils.data_synth import load_benchmark
from commands.utils.openset_eval import evaluate
from commands.utils.run_directory import RunManifest, git_revision, threshold_chart, unique_run_dir, write_json


class Evaluate:
    """Open-set evaluation of a stored checkpoint"""

    def __init__(self, cli):
        self.cli = cli

        parser = cli.add_command('evaluate', self.evaluate, 'Evaluate a checkpoint on the target domain')
        parser.add_argument('--checkpoint', required=True, help='checkpoint.rpfckpt file')
        parser.add_argument('--bench', required=True, help='Benchmark directory')
        parser.add_argument('--out', help='Output directory (default: <checkpoint dir>/eval)')

    def evaluate(self, args: argparse.Namespace) -> int:
        """
        Writes eval.json, eval_thresholds.csv and thresholds.svg, and prints Acc and the best H-score

        Parameters
        ----------
        args (argparse.Namespace): Parsed arguments
        """

        checkpoint = load_checkpoint(args.checkpoint)
        bundle = load_benchmark(args.bench)

        out_dir = unique_run_dir(args.out or Path(args.checkpoint).parent / 'eval')
        manifest = RunManifest(command='evaluate', config_path=args.config, config=self.cli.config,
                               seed=checkpoint.sidecar.get('seed'), output_dir=str(out_dir),
                               git_revision=git_revision())

        report = evaluate(checkpoint.state, bundle.target, bundle.class_split)
        write_json(out_dir / 'eval.json', report.to_dict())
        sweep = report.sweep.to_frame()
        sweep.to_csv(out_dir / 'eval_thresholds.csv', index=False)
        threshold_chart({checkpoint.sidecar.get('variant', 'model'): sweep}, out_dir / 'thresholds.svg')

        manifest.finish()
        manifest.write()

        print(report_templates.success(f'Evaluation written to {out_dir}'))
        print(report_templates.key_values('Target:', {
            'Acc': report.acc_known,
            'H-score': report.best_h_score,
            'threshold': report.best_threshold
        }))
        for flag in report.sweep.flags:
            print(report_templates.error_warning(flag))
        return 0


def setup(cli):
    """
    Add the command to the CLI on discovery

    Parameters
    ----------
    cli (Cli): CLI instance
    """

    cli.add_group(Evaluate(cli))
