import argparse
from dataclasses import asdict

from commands.utils import report_templates
from commands.utils.config import benchmark_config
from commands.utils.data_synth import PRESETS, generate_benchmark, save_benchmark
from commands.utils.run_directory import RunManifest, git_revision, unique_run_dir


class Generate:
    """Synthesise an open-domain benchmark"""

    def __init__(self, cli):
        self.cli = cli

        parser = cli.add_command('generate', self.generate, 'Generate a synthetic multi-domain benchmark')
        parser.add_argument('--preset', choices=sorted(PRESETS), help='Class split preset')
        parser.add_argument('--seed', type=int, help='Root seed of the benchmark')
        parser.add_argument('--out', required=True, help='Output directory')

    def generate(self, args: argparse.Namespace) -> int:
        """
        Writes source_<k>.csv, target.csv, pretext.csv and manifest.json

        Parameters
        ----------
        args (argparse.Namespace): Parsed arguments
        """

        config = benchmark_config(self.cli.config, preset=args.preset)
        seed = args.seed if args.seed is not None else int(self.cli.config['benchmark'].get('seed', 0))

        bundle = generate_benchmark(config, seed)
        out_dir = unique_run_dir(args.out)

        manifest = RunManifest(command='generate', config_path=args.config, config={'benchmark': asdict(config)},
                               seed=seed, output_dir=str(out_dir), git_revision=git_revision())
        manifest.finish()
        save_benchmark(bundle, out_dir, run=asdict(manifest))

        split = bundle.class_split
        counts = {domain.domain_id: f'{len(domain.train)} train / {len(domain.val)} val' for domain in bundle.sources}
        counts['target'] = f'{len(bundle.target)} ({len(bundle.target_open())} open)'
        counts['pretext'] = f'{len(bundle.pretext.train)} train / {len(bundle.pretext.val)} val'

        print(report_templates.success(f'Benchmark written to {out_dir}'))
        print(report_templates.key_values('Classes:', {
            'known': split.num_known,
            'open': len(split.open_class_ids),
            'target known': len(split.target_known)
        }))
        print(report_templates.key_values('Samples:', counts))
        return 0


def setup(cli):
    """
    Add the command to the CLI on discovery

    Parameters
    ----------
    cli (Cli): CLI instance
    """

    cli.add_group(Generate(cli))
