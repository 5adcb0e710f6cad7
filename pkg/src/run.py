import argparse
import sys
from importlib import import_module
from os import listdir
from pathlib import Path

from commands.utils.config import DEFAULT_CONFIG_PATH, resolve_config
from logger import RpfLogger

COMMANDS_DIR = Path(__file__).parent / 'commands'


class Cli:
    def __init__(self):
        self.log = RpfLogger()  # Initialize logger
        self.logger = self.log.logger

        self.parser = argparse.ArgumentParser(
            prog='rpf',
            description='Open domain generalization lab: pretrain, probe, fine-tune and evaluate on synthetic domains'
        )
        self.subparsers = self.parser.add_subparsers(dest='command', required=True, metavar='command')

        # Options every command accepts after its name
        self.common = argparse.ArgumentParser(add_help=False)
        self.common.add_argument('--config', default=str(DEFAULT_CONFIG_PATH), help='YAML config file')
        self.common.add_argument('--set', action='append', default=[], dest='overrides', metavar='SECTION.KEY=VALUE',
                                 help='Override a config value, e.g. --set train.lr=0.05')

        self.config = {}
        self.command_groups = []
        self.on_error = None

        self.load_commands()

    def load_commands(self) -> None:
        # Load command modules
        for file in sorted(listdir(COMMANDS_DIR)):
            if file.endswith('.py') and not file.startswith('_'):
                import_module(f'commands.{file[:-3]}').setup(self)

    def add_group(self, group) -> None:
        self.command_groups.append(group)

    def add_command(self, name: str, callback, help: str) -> argparse.ArgumentParser:
        """
        Registers a subcommand

        Parameters
        ----------
        name (str): Command name
        callback (Callable[[argparse.Namespace], int | None]): Runs the command
        help (str): One-line description

        Returns
        ----------
        argparse.ArgumentParser: The command's parser, to add arguments to
        """

        parser = self.subparsers.add_parser(name, help=help, description=help, parents=[self.common])
        parser.set_defaults(callback=callback)
        return parser

    def run(self, argv: list[str] | None = None) -> int:
        """
        Parses the arguments and runs the command

        Returns
        ----------
        int: Exit code
        """

        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)

        try:
            self.config = resolve_config(args.config, args.overrides)
            self.log.set_level(self.config['log'].get('level', 'info'))
            return args.callback(args) or 0
        except Exception as error:
            return self.on_error(args.command, error)
        finally:
            self.log.close_file()


if __name__ == '__main__':
    sys.exit(Cli().run())
