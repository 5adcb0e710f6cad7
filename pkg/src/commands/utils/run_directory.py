from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd
import psutil

from . import charts
from .analysis import export_histograms, export_loss_curves
from .checkpoint import save_checkpoint
from .misc_utils import ignore_exception

logger = logging.getLogger('rpf.runs')

VERSION = '1.0.0'


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def git_revision() -> str | None:
    """Current git commit of the working tree, None outside a repository"""

    with ignore_exception(OSError, subprocess.SubprocessError):
        result = subprocess.run(['git', 'rev-parse', '--short', 'HEAD'], capture_output=True, text=True, timeout=5,
                                cwd=Path(__file__).parent)
        if result.returncode == 0:
            return result.stdout.strip()
    return None


def host_stamp() -> dict:
    process = psutil.Process()
    return {
        'pid': process.pid,
        'rss_mb': round(process.memory_info().rss / 1024 ** 2, 1),
        'cpu_count': psutil.cpu_count()
    }


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seed: int | None
    output_dir: str
    version: str = VERSION
    git_revision: str | None = None
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    status: str = 'running'
    host: dict = field(default_factory=dict)

    def finish(self, status: str = 'ok') -> None:
        self.finished_at = _now()
        self.status = status
        self.host = host_stamp()

    def write(self) -> Path:
        path = Path(self.output_dir) / 'manifest.json'
        write_json(path, asdict(self))
        return path


def unique_run_dir(path: str | Path) -> Path:
    """
    Creates the output directory. An existing non-empty directory is never reused;
    a numeric suffix (-1, -2, ...) is appended instead

    Returns
    ----------
    Path: The created directory
    """

    path = Path(path)
    candidate = path
    suffix = 0
    while candidate.exists() and any(candidate.iterdir()):
        suffix += 1
        candidate = path.with_name(f'{path.name}-{suffix}')

    if candidate != path:
        logger.warning(f'{path} already holds results, writing to {candidate} instead')
    candidate.mkdir(parents=True, exist_ok=True)
    return candidate


def write_json(path: str | Path, data: dict) -> Path:
    path = Path(path)
    with open(path, 'w', encoding='utf8') as f:
        json.dump(data, f, indent=2)
    return path


def threshold_chart(sweeps: dict[str, pd.DataFrame], path: str | Path) -> Path:
    """H-score against threshold, one line per label"""

    series = {label: list(zip(frame['threshold'], frame['h_score'])) for label, frame in sweeps.items()}
    return charts.write_svg(path, charts.line_chart(series, 'H-score across thresholds', 'threshold', 'H-score'))


def write_experiment(run_dir: str | Path, result, config) -> Path:
    """
    Writes every artifact of one experiment

    Parameters
    ----------
    run_dir (str | Path): Output directory, created when missing
    result (trainer.ExperimentResult): The finished experiment
    config (trainer.TrainConfig): Its config

    Returns
    ----------
    Path: The run directory
    """

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    record = result.record

    write_json(run_dir / 'config.json', config.to_dict())
    record.metrics_frame().to_csv(run_dir / 'metrics.csv', index=False)
    if record.step_trace:
        pd.DataFrame(record.step_trace).to_csv(run_dir / 'trace.csv', index=False)

    save_checkpoint(run_dir / 'checkpoint.rpfckpt', record.state, result.bank, {
        'config_hash': record.config_hash,
        'seed': record.seed,
        'variant': record.variant.value,
        'selected_epoch': record.selected_epoch
    })
    result.bank.to_csv(run_dir / 'prototypes.csv')

    write_json(run_dir / 'eval.json', result.eval_report.to_dict())
    sweep = result.eval_report.sweep.to_frame()
    sweep.to_csv(run_dir / 'eval_thresholds.csv', index=False)
    threshold_chart({record.variant.value: sweep}, run_dir / 'thresholds.svg')

    write_json(run_dir / 'analysis.json', result.analysis.to_dict())
    export_histograms(result.analysis, run_dir)
    export_loss_curves({record.variant.value: [record]}, run_dir, config.ema_factor)

    logger.info(f'Wrote run artifacts to {run_dir}')
    return run_dir
