import logging
import os
import sys
from pathlib import Path

LEVELS = {'debug': logging.DEBUG, 'info': logging.INFO, 'warning': logging.WARNING, 'error': logging.ERROR}


class RpfLogger:
    """Logging config for the lab"""

    def __init__(self, level: str | None = None):
        logger = logging.getLogger('rpf')
        logger.setLevel(LEVELS.get((level or os.environ.get('RPF_LOG', 'info')).lower(), logging.INFO))
        logger.propagate = False

        # Rebuild handlers so repeated CLI invocations in one process never stack them
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

        self.formatter = logging.Formatter('[{asctime}] [{levelname:<8}] {name}: {message}', '%Y-%m-%d %H:%M:%S',
                                           style='{')
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(self.formatter)
        logger.addHandler(handler)

        self.logger = logger

    def set_level(self, level: str) -> None:
        if os.environ.get('RPF_LOG'):
            return
        self.logger.setLevel(LEVELS.get(str(level).lower(), logging.INFO))

    def attach_file(self, run_dir: str | Path, filename: str = 'rpf.log') -> Path:
        """Mirrors the log into a file inside the run directory"""

        self.close_file()
        path = Path(run_dir) / filename
        handler = logging.FileHandler(filename=path, encoding='utf-8', mode='w')
        handler.setFormatter(self.formatter)
        self.logger.addHandler(handler)
        return path

    def close_file(self) -> None:
        for handler in list(self.logger.handlers):
            if isinstance(handler, logging.FileHandler):
                self.logger.removeHandler(handler)
                handler.close()
