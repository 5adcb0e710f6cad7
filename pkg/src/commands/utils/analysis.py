from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from . import charts, nn_core
from .data_synth import BenchmarkBundle, DomainDataset
from .exceptions import EmptyPopulationError, InputError, ShapeError, ZeroDenominatorError
from .misc_utils import ema
from .openset_eval import closed_set_accuracy, predict_proba

logger = logging.getLogger('rpf.analysis')

CONVENTIONS = {
    'domain_gap': 'per-dimension mean squared error between same-class centroids',
    'intra_class_distance': 'per-dimension mean squared error to the class centroid, averaged per class',
    'feature_drift': 'squared L2 ||f(x) - f0(x)||^2 summed over dimensions, averaged over inputs',
    'head_distance': 'unsquared L2 between [W|b] rows, averaged over classes'
}


class GapScope(str, Enum):
    TARGET_VS_SOURCES = 'target-vs-sources'
    SOURCE_PAIRS = 'source-pairs'


@dataclass
class CentroidTable:
    """Feature centroid per (domain, class) cell, plus the requested cells that had no samples"""

    centroids: dict[tuple[str, int], np.ndarray]
    missing: list[tuple[str, int]] = field(default_factory=list)

    def domains(self) -> list[str]:
        return list(dict.fromkeys(domain for domain, _ in self.centroids))

    def classes_of(self, domain: str) -> set[int]:
        return {c for d, c in self.centroids if d == domain}


@dataclass
class ConfidenceStats:
    known_max_confidence: float
    known_entropy: float
    unknown_max_confidence: float
    unknown_entropy: float
    flags: list[str] = field(default_factory=list)


@dataclass
class Histogram:
    counts: list[int]
    edges: list[float]
    clamped: int = 0


@dataclass
class AnalysisReport:
    domain_gap_target: float
    domain_gap_sources: float
    domain_gap_pairs: dict[str, float]
    intra_class_distance: dict[str, float]
    feature_drift: dict[str, float]
    confidence: ConfidenceStats
    head_distance: float | None
    model_acc: float
    lp_acc: float
    f0_trained_head_acc: float
    imp1: float | None
    imp2: float | None
    histograms: dict[str, Histogram]
    correlation: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        report = asdict(self)
        report['conventions'] = CONVENTIONS
        return report


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float((diff * diff).mean())


def class_centroids(f: nn_core.MlpParams, datasets: list[DomainDataset],
                    classes: list[int] | None = None) -> CentroidTable:
    """
    Mean feature of every (domain, class) cell

    Parameters
    ----------
    f (nn_core.MlpParams): The extractor to embed with
    datasets (list[DomainDataset]): One dataset per domain
    classes (list[int]): Cells to compute. Defaults to the classes present in each dataset

    Returns
    ----------
    CentroidTable: Centroids keyed by (domain_id, class); requested empty cells are listed as missing
    """

    table = CentroidTable({})
    for dataset in datasets:
        if not len(dataset):
            continue
        features = nn_core.mlp_forward(f, dataset.x)
        for c in (dataset.classes if classes is None else classes):
            mask = dataset.y == c
            if not mask.any():
                table.missing.append((dataset.domain_id, int(c)))
                continue
            table.centroids[(dataset.domain_id, int(c))] = features[mask].mean(axis=0)

    if table.missing:
        logger.debug(f'Skipped {len(table.missing)} empty centroid cells')
    return table


def _pair_gaps(table: CentroidTable, pairs: list[tuple[str, str]]) -> list[float]:
    gaps = []
    for a, b in pairs:
        for c in sorted(table.classes_of(a) & table.classes_of(b)):
            gaps.append(_mse(table.centroids[(a, c)], table.centroids[(b, c)]))
    return gaps


def domain_gap(table: CentroidTable, scope: GapScope | str = GapScope.SOURCE_PAIRS,
               target_id: str = 'target') -> float:
    """
    Mean MSE distance between same-class centroids of different domains, averaged uniformly over
    every (class, domain pair) cell

    Parameters
    ----------
    table (CentroidTable): Centroids from class_centroids
    scope (GapScope): target-vs-sources pairs the target with every source, source-pairs uses source pairs only
    target_id (str): Domain id of the target in the table

    Returns
    ----------
    float: The domain gap
    """

    scope = GapScope(scope)
    sources = [domain for domain in table.domains() if domain != target_id]
    if scope == GapScope.TARGET_VS_SOURCES:
        pairs = [(target_id, source) for source in sources]
    else:
        pairs = list(combinations(sources, 2))

    gaps = _pair_gaps(table, pairs)
    if not gaps:
        raise InputError(f'No class is shared by any domain pair in scope {scope.value}')
    return float(np.mean(gaps))


def domain_gap_table(table: CentroidTable) -> dict[str, float]:
    """Domain gap of every domain pair that shares a class, keyed 'a|b'"""

    result = {}
    for a, b in combinations(table.domains(), 2):
        gaps = _pair_gaps(table, [(a, b)])
        if gaps:
            result[f'{a}|{b}'] = float(np.mean(gaps))
    return result


def intra_class_distance(f: nn_core.MlpParams, dataset: DomainDataset) -> float:
    """
    Per class, mean MSE distance of each feature to the class centroid; then the unweighted mean over classes
    """

    if not len(dataset):
        raise EmptyPopulationError(f'No samples in {dataset.domain_id}')

    features = nn_core.mlp_forward(f, dataset.x)
    per_class = []
    for c in dataset.classes:
        members = features[dataset.y == c]
        diff = members - members.mean(axis=0)
        per_class.append(float((diff * diff).mean(axis=1).mean()))
    return float(np.mean(per_class))


def feature_drift(f: nn_core.MlpParams, f0: nn_core.MlpParams, dataset: DomainDataset) -> float:
    """Mean over inputs of ||f(x) - f0(x)||^2"""

    if f.dims != f0.dims:
        raise ShapeError(f'f {f.dims} and f0 {f0.dims} have different architectures')
    if not len(dataset):
        return 0.0

    diff = nn_core.mlp_forward(f, dataset.x) - nn_core.mlp_forward(f0, dataset.x)
    return float((diff * diff).sum(axis=1).mean())


def confidence_entropy_stats(state: nn_core.ModelState, target: DomainDataset,
                             known_classes: tuple[int, ...]) -> ConfidenceStats:
    """
    Mean max-confidence and mean softmax entropy, separately for known-class and open-class target samples
    """

    probs = predict_proba(state.f, state.h, target.x)
    max_confidence = probs.max(axis=1)
    entropy = -nn_core.negative_entropy(probs)
    is_known = np.isin(target.y, known_classes)

    flags = []
    stats = {}
    for name, mask in (('known', is_known), ('unknown', ~is_known)):
        if mask.any():
            stats[name] = (float(max_confidence[mask].mean()), float(entropy[mask].mean()))
        else:
            flags.append(f'no {name}-class target samples')
            stats[name] = (float('nan'), float('nan'))

    return ConfidenceStats(stats['known'][0], stats['known'][1], stats['unknown'][0], stats['unknown'][1], flags)


def head_euclidean_distance(h_a: nn_core.HeadParams, h_b: nn_core.HeadParams) -> float:
    """
    Row-wise (class-wise) Euclidean distance between the [W|b] matrices of two heads, averaged over classes
    """

    if h_a.W.shape != h_b.W.shape:
        raise ShapeError(f'Heads differ in shape: {h_a.W.shape} vs {h_b.W.shape}')
    return float(np.linalg.norm(h_a.augmented() - h_b.augmented(), axis=1).mean())


def improvement_ratios(model_acc: float, lp_acc: float, frozen_trained_head_acc: float,
                       frozen_lp_head_acc: float) -> tuple[float, float]:
    """
    Imp.1 = (model_acc / lp_acc - 1) * 100 and Imp.2 = (acc of h*(f0) / acc of h_lp(f0) - 1) * 100

    Returns
    ----------
    tuple[float, float]: (imp1, imp2) in percent
    """

    if lp_acc == 0 or frozen_lp_head_acc == 0:
        raise ZeroDenominatorError('Improvement ratios are undefined when the linear-probe accuracy is 0')
    return (model_acc / lp_acc - 1) * 100, (frozen_trained_head_acc / frozen_lp_head_acc - 1) * 100


def spearman_rho(xs, ys) -> float:
    """
    Pearson correlation of the average-ranked sequences (ties get the mean of their ranks)

    Returns
    ----------
    float: rho in [-1, 1], nan when either sequence is constant
    """

    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeError(f'Expected two sequences of equal length, got {xs.shape} and {ys.shape}')
    if len(xs) < 2:
        raise InputError('Spearman correlation needs at least 2 points')

    rank_x = rankdata(xs, method='average')
    rank_y = rankdata(ys, method='average')
    dx, dy = rank_x - rank_x.mean(), rank_y - rank_y.mean()
    denominator = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denominator == 0:
        logger.warning('Spearman correlation is undefined for a constant sequence')
        return float('nan')
    return float(np.clip((dx * dy).sum() / denominator, -1.0, 1.0))


def histogram(values, bins: int = 20, value_range: tuple[float, float] = (0.0, 1.0)) -> Histogram:
    """
    Fixed-width histogram, the last bin closed on the right. Values outside the range are clamped and counted
    """

    if bins < 1:
        raise InputError(f'A histogram needs at least 1 bin, got {bins}')

    values = np.asarray(values, dtype=np.float64)
    lo, hi = value_range
    clamped = int(((values < lo) | (values > hi)).sum())
    if clamped:
        logger.warning(f'{clamped} values fall outside [{lo}, {hi}] and were clamped')

    counts, edges = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    return Histogram(counts=counts.tolist(), edges=edges.tolist(), clamped=clamped)


def analyze(state: nn_core.ModelState, bundle: BenchmarkBundle, bins: int = 20) -> AnalysisReport:
    """
    Feature, logit and head diagnostics of a trained model.
    Source domains are measured on their validation splits, the target on its known-class samples only,
    so the centroid, spread and drift figures share one population

    Parameters
    ----------
    state (nn_core.ModelState): Trained model with f0 and h_lp set
    bundle (BenchmarkBundle): The benchmark it was trained on
    bins (int): Histogram bin count

    Returns
    ----------
    AnalysisReport: The report
    """

    split = bundle.class_split
    target = bundle.target
    target_known = bundle.target_known()
    source_vals = [domain.val for domain in bundle.sources]

    centroids = class_centroids(state.f, [*source_vals, target_known])
    domains = [*source_vals, target_known]

    probs = predict_proba(state.f, state.h, target.x)
    is_known = np.isin(target.y, split.known_classes)

    model_acc = closed_set_accuracy(state.f, state.h, target_known)
    lp_acc = closed_set_accuracy(state.f0, state.h_lp, target_known)
    f0_trained_head_acc = closed_set_accuracy(state.f0, state.h, target_known)
    try:
        imp1, imp2 = improvement_ratios(model_acc, lp_acc, f0_trained_head_acc, lp_acc)
    except ZeroDenominatorError as e:
        logger.warning(str(e))
        imp1 = imp2 = None

    return AnalysisReport(
        domain_gap_target=domain_gap(centroids, GapScope.TARGET_VS_SOURCES, target.domain_id),
        domain_gap_sources=domain_gap(centroids, GapScope.SOURCE_PAIRS, target.domain_id),
        domain_gap_pairs=domain_gap_table(centroids),
        intra_class_distance={d.domain_id: intra_class_distance(state.f, d) for d in domains},
        feature_drift={d.domain_id: feature_drift(state.f, state.f0, d) for d in domains},
        confidence=confidence_entropy_stats(state, target, split.known_classes),
        head_distance=head_euclidean_distance(state.h, state.h_lp) if state.h_lp is not None else None,
        model_acc=model_acc,
        lp_acc=lp_acc,
        f0_trained_head_acc=f0_trained_head_acc,
        imp1=imp1,
        imp2=imp2,
        histograms={
            'known': histogram(probs.max(axis=1)[is_known], bins),
            'unknown': histogram(probs.max(axis=1)[~is_known], bins)
        }
    )


def compare_reports(reports: dict[str, AnalysisReport]) -> pd.DataFrame:
    """
    Side-by-side rows of the feature, logit and head tables for several models (e.g. rpf vs lpft)
    """

    rows = {}
    for label, report in reports.items():
        source_ids = [domain for domain in report.intra_class_distance if domain != 'target']
        rows[label] = {
            'domain_gap_target': report.domain_gap_target,
            'domain_gap_sources': report.domain_gap_sources,
            'intra_class_target': report.intra_class_distance.get('target'),
            'intra_class_sources': float(np.mean([report.intra_class_distance[d] for d in source_ids])),
            'drift_target': report.feature_drift.get('target'),
            'drift_sources': float(np.mean([report.feature_drift[d] for d in source_ids])),
            'max_conf_known': report.confidence.known_max_confidence,
            'max_conf_unknown': report.confidence.unknown_max_confidence,
            'entropy_known': report.confidence.known_entropy,
            'entropy_unknown': report.confidence.unknown_entropy,
            'head_distance': report.head_distance,
            'imp1': report.imp1,
            'imp2': report.imp2
        }
    return pd.DataFrame(rows)


def directional_claims(rpf, lpft) -> dict[str, bool]:
    """
    Checks the qualitative RPF-vs-LPFT claims on one matched pair of experiments

    Parameters
    ----------
    rpf (ExperimentResult): RPF run
    lpft (ExperimentResult): LPFT run with the same seed

    Returns
    ----------
    dict[str, bool]: claim -> whether it holds
    """

    a, b = rpf.analysis, lpft.analysis
    return {
        'higher_train_lpft_loss': rpf.record.selected.l_lpft >= lpft.record.selected.l_lpft,
        'train_accuracy_at_least_99': min(rpf.record.selected.train_acc, lpft.record.selected.train_acc) >= 0.99,
        'lower_feature_drift': a.feature_drift['target'] < b.feature_drift['target'],
        'lower_intra_class_distance': a.intra_class_distance['target'] < b.intra_class_distance['target'],
        'higher_unknown_entropy': a.confidence.unknown_entropy > b.confidence.unknown_entropy,
        'lower_unknown_max_confidence': a.confidence.unknown_max_confidence < b.confidence.unknown_max_confidence,
        'larger_head_distance': a.head_distance > b.head_distance
    }


def claims_over_seeds(pairs: list[tuple]) -> pd.DataFrame:
    """
    Aggregates directional_claims over matched (seed, rpf, lpft) runs.
    A claim holds when it holds in at least two thirds of the seeds

    Returns
    ----------
    pd.DataFrame: Columns claim, held, seeds, holds
    """

    counts = {}
    for _, rpf, lpft in pairs:
        for claim, held in directional_claims(rpf, lpft).items():
            counts[claim] = counts.get(claim, 0) + int(held)

    seeds = len(pairs)
    return pd.DataFrame([
        {'claim': claim, 'held': held, 'seeds': seeds, 'holds': held >= math.ceil(2 * seeds / 3)}
        for claim, held in counts.items()
    ], columns=['claim', 'held', 'seeds', 'holds'])


def export_loss_curves(records: dict[str, list], out_dir: str | Path | None = None,
                       factor: float = 0.9) -> pd.DataFrame:
    """
    Per-source-domain L_lp-ft curves, raw and EMA-smoothed, averaged over the seeds of each variant

    Parameters
    ----------
    records (dict[str, list[RunRecord]]): Variant -> runs
    out_dir (str | Path): Writes loss_curves.csv and loss_curves.svg there when given
    factor (float): EMA factor

    Returns
    ----------
    pd.DataFrame: Columns variant, domain, epoch, raw, ema; epochs x domains x variants rows
    """

    rows = []
    series = {}
    for variant, runs in records.items():
        domains = list(runs[0].epochs[0].domain_l_lpft)
        for domain in domains:
            raw = [float(np.mean([run.epochs[i].domain_l_lpft[domain] for run in runs]))
                   for i in range(len(runs[0].epochs))]
            smoothed = ema(raw, factor)
            for i, (value, smooth) in enumerate(zip(raw, smoothed), start=1):
                rows.append({'variant': variant, 'domain': domain, 'epoch': i, 'raw': value, 'ema': smooth})
            series[f'{variant} {domain}'] = list(enumerate(smoothed, start=1))

    frame = pd.DataFrame(rows, columns=['variant', 'domain', 'epoch', 'raw', 'ema'])
    if out_dir is not None:
        out_dir = Path(out_dir)
        frame.to_csv(out_dir / 'loss_curves.csv', index=False)
        charts.write_svg(out_dir / 'loss_curves.svg',
                         charts.line_chart(series, 'Training L_lp-ft per source domain (EMA)', 'epoch', 'L_lp-ft'))
    return frame


def export_histograms(report: AnalysisReport, out_dir: str | Path) -> pd.DataFrame:
    """Writes histograms.csv and histograms.svg for the known/unknown max-confidence histograms"""

    out_dir = Path(out_dir)
    rows = []
    for population, hist in report.histograms.items():
        for lo, hi, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            rows.append({'population': population, 'bin_lo': lo, 'bin_hi': hi, 'count': count})
    frame = pd.DataFrame(rows, columns=['population', 'bin_lo', 'bin_hi', 'count'])
    frame.to_csv(out_dir / 'histograms.csv', index=False)

    edges = report.histograms['known'].edges
    charts.write_svg(out_dir / 'histograms.svg',
                     charts.bar_chart({name: hist.counts for name, hist in report.histograms.items()}, edges,
                                      'Maximum confidence on target samples', 'max confidence', 'count'))
    return frame
