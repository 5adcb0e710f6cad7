import argparse
from pathlib import Path

from commands.utils import report_templates
from commands.utils.analysis import analyze, compare_reports, export_histograms
from commands.utils.checkpoint import load_checkpoint
from commands.utils.data_synth import load_benchmark
from commands.utils.exceptions import InputError, MissingStateError
from commands.utils.run_directory import RunManifest, git_revision, unique_run_dir, write_json


class Analyze:
    """Feature, logit and head diagnostics of stored checkpoints"""

    def __init__(self, cli):
        self.cli = cli

        parser = cli.add_command('analyze', self.analyze, 'Analyse one checkpoint or compare two')
        parser.add_argument('--checkpoint', help='checkpoint.rpfckpt file')
        parser.add_argument('--compare', nargs=2, metavar=('A', 'B'), help='Two checkpoints to compare, e.g. rpf lpft')
        parser.add_argument('--bench', required=True, help='Benchmark directory')
        parser.add_argument('--out', help='Output directory (default: <checkpoint dir>/analysis)')

    def _load(self, path: str):
        checkpoint = load_checkpoint(path)
        if checkpoint.state.f0 is None or checkpoint.state.h_lp is None:
            raise MissingStateError(f'{path} holds no f0 or h_lp snapshot, nothing to measure drift against')
        return checkpoint

    def analyze(self, args: argparse.Namespace) -> int:
        """
        Writes analysis.json and the histograms for one checkpoint, or compare.csv with
        side-by-side rows for two

        Parameters
        ----------
        args (argparse.Namespace): Parsed arguments
        """

        if bool(args.checkpoint) == bool(args.compare):
            raise InputError('Pass either --checkpoint or --compare A B')

        bundle = load_benchmark(args.bench)
        paths = args.compare or [args.checkpoint]
        bins = int(self.cli.config['analysis'].get('histogram_bins', 20))

        out_dir = unique_run_dir(args.out or Path(paths[0]).parent / 'analysis')
        manifest = RunManifest(command='analyze', config_path=args.config, config=self.cli.config, seed=None,
                               output_dir=str(out_dir), git_revision=git_revision())

        reports = {}
        for path in paths:
            checkpoint = self._load(path)
            label = checkpoint.sidecar.get('variant', Path(path).parent.name)
            if label in reports:
                label = f'{label} ({Path(path).parent.name})'
            reports[label] = analyze(checkpoint.state, bundle, bins)

        if args.compare:
            table = compare_reports(reports)
            table.to_csv(out_dir / 'compare.csv', index_label='metric')
            write_json(out_dir / 'analysis.json', {label: report.to_dict() for label, report in reports.items()})
            print(report_templates.success(f'Comparison written to {out_dir}'))
            print(table.to_string(float_format=lambda value: f'{value:.4f}'))
        else:
            report = next(iter(reports.values()))
            write_json(out_dir / 'analysis.json', report.to_dict())
            export_histograms(report, out_dir)
            print(report_templates.success(f'Analysis written to {out_dir}'))
            print(report_templates.key_values('Target:', {
                'domain gap': report.domain_gap_target,
                'feature drift': report.feature_drift['target'],
                'head distance': report.head_distance,
                'unknown entropy': report.confidence.unknown_entropy
            }))

        manifest.finish()
        manifest.write()
        return 0


def setup(cli):
    """
    Add the command to the CLI on discovery

    Parameters
    ----------
    cli (Cli): CLI instance
    """

    cli.add_group(Analyze(cli))
