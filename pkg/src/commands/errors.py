import sys
import traceback

from commands.utils import report_templates
from commands.utils.exceptions import (DivergenceError, FormatError, InputError, NumericalError, RpfError,
                                       TargetLeakError)


class ErrorHandler:
    """Error handler for commands"""

    def __init__(self, cli):
        """
        Parameters
        ----------
        cli (Cli): The CLI instance
        """

        self.cli = cli
        cli.on_error = self.on_command_error  # Set error handler for every command

    def on_command_error(self, command: str, error: Exception) -> int:
        """
        Reports a failed command and maps the error to an exit code

        Parameters
        ----------
        command (str): Name of the failed command
        error (Exception): The raised exception

        Returns
        ----------
        int: 2 for bad input, 3 for numerical failures, 4 for unreadable files, 1 otherwise
        """

        self.cli.logger.info(f'❌ {command} | {type(error).__name__}')

        if isinstance(error, DivergenceError):
            message = report_templates.error_fatal(f'Training diverged: {error}')
            if error.last_metrics:
                message += '\n' + report_templates.key_values('Last finite metrics:', error.last_metrics)
            self.cli.logger.error(str(error))
            return self._report(message, error.exit_code)

        elif isinstance(error, TargetLeakError):
            return self._report(report_templates.error_fatal(str(error)), error.exit_code)

        elif isinstance(error, InputError):
            return self._report(report_templates.error_warning(f'{error}\nRun with --help for usage.'),
                                error.exit_code)

        elif isinstance(error, (NumericalError, FormatError)):
            self.cli.logger.error(str(error))
            return self._report(report_templates.error_fatal(str(error)), error.exit_code)

        elif isinstance(error, RpfError):
            return self._report(report_templates.error_fatal(str(error)), error.exit_code)

        elif isinstance(error, OSError):
            self.cli.logger.error(str(error))
            return self._report(report_templates.error_fatal(f'Could not access {error.filename or "a file"}: ' +
                                                             f'{error.strerror or error}'), 2)

        # Log full exception
        self.cli.logger.error(''.join(traceback.format_exception(type(error), error, error.__traceback__)))
        return self._report(report_templates.error_fatal('An unknown error occurred'), 1)

    @staticmethod
    def _report(message: str, exit_code: int) -> int:
        print(message, file=sys.stderr)
        return exit_code


def setup(cli):
    """
    Add the handler to the CLI on command discovery

    Parameters
    ----------
    cli (Cli): CLI instance
    """

    ErrorHandler(cli)
