from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import nn_core
from .analysis import AnalysisReport, analyze, spearman_rho
from .data_synth import BenchmarkBundle, DomainDataset, DomainSplit, Role, concat_datasets, ensure_trainable
from .exceptions import (ConfigError, DivergenceError, EmptyPopulationError, MissingStateError, NonFiniteError,
                         RpfError)
from .losses import ABLATION_ORDER, LossSpec, PrototypeBank, Variant, compute_prototypes
from .misc_utils import config_hash, rng_stream
from .openset_eval import EvalReport, closed_set_accuracy, evaluate
from .run_directory import write_experiment

logger = logging.getLogger('rpf.trainer')

MAX_LOSS = 1e6
DEFAULT_LAMBDAS = (1.0, 0.5, 0.1)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.001
    decay_epoch: int = 24
    decay_factor: float = 0.1
    lambda_hr: float = 0.1
    variant: Variant = Variant.RPF
    seed: int = 0
    lp_epochs: int = 10
    lp_lr: float = 0.01
    fr_weight: float = 1.0
    fr_enabled: bool = True
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    activation: str = 'relu'
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    trace_steps: bool = False
    ema_factor: float = 0.9

    def __post_init__(self):
        self.variant = Variant.from_name(self.variant)
        self.hidden_dims = tuple(int(width) for width in self.hidden_dims)

        if self.epochs < 1 or self.lp_epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigError('epochs, lp_epochs and pretrain_epochs must be >= 1')
        if not 0 <= self.decay_epoch <= self.epochs:
            raise ConfigError(f'decay_epoch must lie in [0, epochs={self.epochs}], got {self.decay_epoch}')
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be >= 1, got {self.batch_size}')
        if min(self.lr, self.lp_lr, self.pretrain_lr) <= 0:
            raise ConfigError('Learning rates must be > 0')
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f'decay_factor must lie in (0, 1], got {self.decay_factor}')
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError('momentum must lie in [0, 1) and weight_decay must be >= 0')
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f'grad_clip must be > 0 when set, got {self.grad_clip}')
        if self.feature_dim < 1 or any(width < 1 for width in self.hidden_dims):
            raise ConfigError('Layer widths must be >= 1')
        if not 0 <= self.ema_factor < 1:
            raise ConfigError(f'ema_factor must lie in [0, 1), got {self.ema_factor}')
        if self.activation not in nn_core.ACTIVATIONS:
            raise ConfigError(f'Unknown activation {self.activation!r}')

        # Validates lambda_hr and fr_weight
        self.loss_spec()

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f'Unknown train settings: {", ".join(sorted(unknown))}')
        return cls(**values)

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.variant, self.lambda_hr, self.fr_weight, self.fr_enabled)

    def replace(self, **changes) -> TrainConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        values = asdict(self)
        values['variant'] = self.variant.value
        values['hidden_dims'] = list(self.hidden_dims)
        return values

    def mlp_dims(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden_dims, self.feature_dim]


@dataclass
class EpochLog:
    epoch: int
    lr: float
    l_lpft: float
    l_fr: float
    l_hr: float
    train_acc: float
    val_acc: float
    domain_l_lpft: dict[str, float] = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {key: value for key, value in asdict(self).items() if key != 'domain_l_lpft'}
        row.update({f'l_lpft[{domain}]': value for domain, value in self.domain_l_lpft.items()})
        return row


@dataclass
class RunRecord:
    variant: Variant
    epochs: list[EpochLog]
    selected_epoch: int
    state: nn_core.ModelState
    seed: int
    config_hash: str
    step_trace: list[dict] = field(default_factory=list)

    @property
    def selected(self) -> EpochLog:
        return self.epochs[self.selected_epoch - 1]

    def metrics_frame(self) -> pd.DataFrame:
        """One row per epoch: epoch, lr, l_lpft, l_fr, l_hr, train_acc, val_acc, then per-domain L_lp-ft"""

        return pd.DataFrame([log.to_row() for log in self.epochs])


@dataclass
class PretrainResult:
    f0: nn_core.MlpParams
    val_acc: float
    losses: list[float]


@dataclass
class Prepared:
    """Everything upstream of fine-tuning, shared by every variant that uses the same seed"""

    f0: nn_core.MlpParams
    h_lp: nn_core.HeadParams
    bank: PrototypeBank
    pretext_val_acc: float
    lp_losses: list[float]
    lp_val_acc: float

    def state(self) -> nn_core.ModelState:
        return nn_core.ModelState(self.f0.copy(), self.h_lp.copy(), f0=self.f0, h_lp=self.h_lp)


@dataclass
class ExperimentResult:
    record: RunRecord
    eval_report: EvalReport
    analysis: AnalysisReport
    bank: PrototypeBank
    prepared: Prepared
    run_dir: Path | None = None


def _ensure_finite(loss: float, stage: str, last_metrics: dict) -> None:
    if not math.isfinite(loss) or abs(loss) > MAX_LOSS:
        raise DivergenceError(f'{stage} diverged (loss {loss})', last_metrics)


def _train_epoch(
    state: nn_core.ModelState,
    x: np.ndarray,
    y: np.ndarray,
    loss_spec,
    opt: nn_core.OptimizerState,
    batch_size: int,
    rng: np.random.Generator,
    stage: str,
    prototypes: np.ndarray | None = None,
    f0_features: np.ndarray | None = None,
    last_metrics: dict | None = None,
    trace: list | None = None
) -> dict[str, float]:
    """
    One shuffled pass of mini-batch SGD

    Returns
    ----------
    dict[str, float]: Sample-weighted batch means of the total loss ('total') and every active term
    """

    order = rng.permutation(len(y))
    sums = {}
    for step, start in enumerate(range(0, len(order), batch_size)):
        indices = order[start:start + batch_size]
        batch = nn_core.Batch(x[indices], y[indices], None if f0_features is None else f0_features[indices])
        try:
            grads = nn_core.compute_gradients(state, batch, loss_spec, prototypes)
        except NonFiniteError as e:
            raise DivergenceError(f'{stage} diverged: {e}', last_metrics) from e
        _ensure_finite(grads.loss, stage, last_metrics)

        nn_core.sgd_step(state, grads, opt)

        for name, value in (('total', grads.loss), *grads.components.items()):
            sums[name] = sums.get(name, 0.0) + value * len(indices)
        if trace is not None:
            trace.append({'epoch': opt.epoch_counter + 1, 'step': step, 'total': grads.loss, **grads.components})
        logger.debug(f'{stage} | epoch {opt.epoch_counter + 1} step {step} | loss {grads.loss:.6f}')

    return {name: total / len(y) for name, total in sums.items()}


def run_pretext_training(pretext: DomainSplit, config: TrainConfig) -> PretrainResult:
    """
    Trains a fresh MLP and a temporary head by cross-entropy on the pretext task.
    The temporary head is discarded

    Parameters
    ----------
    pretext (DomainSplit): Pretext train/val split
    config (TrainConfig): Uses seed, architecture, pretrain_epochs and pretrain_lr

    Returns
    ----------
    PretrainResult: Frozen f0, pretext validation accuracy and per-epoch losses
    """

    train, val = pretext.train, pretext.val
    ensure_trainable(train, val)
    if len(train.classes) < 2:
        raise EmptyPopulationError('Pretext training needs at least 2 classes')
    num_classes = int(train.y.max()) + 1

    f = nn_core.init_mlp(config.mlp_dims(train.x.shape[1]), config.seed, config.activation, stream='pretrain')
    h = nn_core.init_head(num_classes, config.feature_dim, config.seed, stream='pretrain-head')
    state = nn_core.ModelState(f, h)
    opt = nn_core.OptimizerState(config.pretrain_lr, decay_epoch=config.pretrain_epochs,
                                 momentum=config.momentum)
    rng = rng_stream(config.seed, 'shuffle', 'pretrain')

    logger.info(f'Pretraining f0 on {len(train)} pretext samples over {num_classes} classes...')
    losses = []
    for _ in range(config.pretrain_epochs):
        means = _train_epoch(state, train.x, train.y, {'lpft': 1.0}, opt, config.batch_size, rng, 'Pretraining',
                             last_metrics={'epoch': opt.epoch_counter, 'loss': losses[-1] if losses else None})
        losses.append(means['total'])
        opt.next_epoch()

    val_acc = closed_set_accuracy(state.f, state.h, val) if len(val) else float('nan')
    logger.info(f'Pretraining done | loss {losses[-1]:.4f} | pretext val acc {val_acc:.4f}')
    return PretrainResult(f0=state.f.freeze(), val_acc=val_acc, losses=losses)


def pretrain_f0(pretext: DomainSplit, config: TrainConfig) -> nn_core.MlpParams:
    return run_pretext_training(pretext, config).f0


def _source_arrays(sources: list[DomainSplit]) -> tuple[DomainDataset, DomainDataset]:
    train = concat_datasets([domain.train for domain in sources], 'sources', Role.SOURCE_TRAIN)
    val = concat_datasets([domain.val for domain in sources], 'sources', Role.SOURCE_VAL)
    ensure_trainable(*(domain.train for domain in sources), *(domain.val for domain in sources))
    return train, val


def linear_probe(state: nn_core.ModelState, sources: list[DomainSplit], config: TrainConfig) -> nn_core.HeadParams:
    """
    Minimises L_lp over the source training data, updating only the head.
    The result becomes both the live head and the frozen h_lp snapshot

    Parameters
    ----------
    state (nn_core.ModelState): Model with f0 set. Its head is the probe's starting point
    sources (list[DomainSplit]): Source domains
    config (TrainConfig): Uses lp_epochs, lp_lr, batch_size and seed

    Returns
    ----------
    nn_core.HeadParams: The frozen h_lp
    """

    return run_linear_probe(state, sources, config)[0]


def run_linear_probe(state: nn_core.ModelState, sources: list[DomainSplit],
                     config: TrainConfig) -> tuple[nn_core.HeadParams, list[float]]:
    """linear_probe that also returns the per-epoch mean L_lp"""

    if state.f0 is None:
        raise MissingStateError('Linear probing needs f0')
    train, _ = _source_arrays(sources)

    features = nn_core.mlp_forward(state.f0, train.x)
    opt = nn_core.OptimizerState(config.lp_lr, decay_epoch=config.lp_epochs)
    rng = rng_stream(config.seed, 'shuffle', 'linear-probe')

    logger.info(f'Linear probing on {len(train)} source samples...')
    losses = []
    for _ in range(config.lp_epochs):
        means = _train_epoch(state, train.x, train.y, {'lp': 1.0}, opt, config.batch_size, rng, 'Linear probing',
                             f0_features=features, last_metrics={'loss': losses[-1] if losses else None})
        losses.append(means['total'])
        opt.next_epoch()

    state.h_lp = state.h
    logger.info(f'Linear probing done | L_lp {losses[-1]:.4f}')
    return state.h_lp, losses


def prepare(bundle: BenchmarkBundle, config: TrainConfig, pretrained: PretrainResult | None = None) -> Prepared:
    """
    Pretraining, linear probing and prototypes: the variant-independent part of a run

    Parameters
    ----------
    bundle (BenchmarkBundle): The benchmark
    config (TrainConfig): Run config
    pretrained (PretrainResult): Reuses an existing f0 instead of pretraining

    Returns
    ----------
    Prepared: f0, h_lp and the prototype bank
    """

    if pretrained is None:
        pretrained = run_pretext_training(bundle.pretext, config)
    f0 = pretrained.f0

    num_known = bundle.class_split.num_known
    state = nn_core.ModelState(f0.copy(), nn_core.init_head(num_known, f0.feature_dim, config.seed), f0=f0)

    h_lp, lp_losses = run_linear_probe(state, bundle.sources, config)

    val = bundle.source_val()
    lp_val_acc = closed_set_accuracy(f0, h_lp, val) if len(val) else float('nan')
    bank = compute_prototypes(f0, bundle.sources, num_known)
    return Prepared(f0=f0, h_lp=h_lp, bank=bank, pretext_val_acc=pretrained.val_acc, lp_losses=lp_losses,
                    lp_val_acc=lp_val_acc)


def fine_tune(state: nn_core.ModelState, sources: list[DomainSplit], bank: PrototypeBank | None,
              config: TrainConfig) -> RunRecord:
    """
    Mini-batch SGD on the variant's objective, starting from f0 and h_lp (or a fresh head for
    no_pretrained_head). The checkpoint with the highest source-val accuracy is kept, earliest on ties

    Parameters
    ----------
    state (nn_core.ModelState): Model with f0 (and h_lp unless the variant re-initialises the head). Not modified
    sources (list[DomainSplit]): Source domains, the only data fine-tuning ever sees
    bank (PrototypeBank): Prototypes, required when L_fr is active
    config (TrainConfig): Run config

    Returns
    ----------
    RunRecord: Per-epoch logs, the selected epoch and the selected model
    """

    spec = config.loss_spec()
    if state.f0 is None:
        raise MissingStateError('Fine-tuning starts from f0, which has not been set')
    if spec.has_fr and bank is None:
        raise MissingStateError(f'Variant {spec.variant.value} needs a prototype bank')

    train, val = _source_arrays(sources)
    num_classes = bank.num_classes if bank is not None else state.h.num_classes

    state = state.copy()
    state.f = state.f0.copy()
    if spec.variant == Variant.NO_PRETRAINED_HEAD:
        state.h = nn_core.init_head(num_classes, state.f.feature_dim, config.seed, stream='head-reinit')
    elif state.h_lp is None:
        raise MissingStateError(f'Variant {spec.variant.value} starts from h_lp, run linear probing first')
    else:
        state.h = state.h_lp.copy()

    uses_f0 = any(term in nn_core.F0_TERMS and coef for term, coef in spec.coefficients().items())
    f0_features = nn_core.mlp_forward(state.f0, train.x) if uses_f0 else None
    prototypes = bank.prototypes if bank is not None else None

    opt = nn_core.OptimizerState(config.lr, config.decay_epoch, config.decay_factor,
                                 momentum=config.momentum, weight_decay=config.weight_decay,
                                 grad_clip=config.grad_clip)
    rng = rng_stream(config.seed, 'shuffle', 'fine-tune')
    trace = [] if config.trace_steps else None

    logger.info(f'Fine-tuning variant {spec.variant.value} (seed {config.seed}, {config.epochs} epochs)...')
    logs = []
    best_acc, best_epoch, best_state = -1.0, 0, None
    for epoch in range(1, config.epochs + 1):
        lr = opt.effective_lr
        last_metrics = logs[-1].to_row() if logs else {}
        means = _train_epoch(state, train.x, train.y, spec, opt, config.batch_size, rng, 'Fine-tuning',
                             prototypes, f0_features, last_metrics, trace)

        log = EpochLog(
            epoch=epoch,
            lr=lr,
            l_lpft=means.get('lpft', 0.0),
            l_fr=means.get('fr', 0.0),
            l_hr=means.get(spec.hr_term, 0.0) if spec.hr_term else 0.0,
            train_acc=closed_set_accuracy(state.f, state.h, train),
            val_acc=closed_set_accuracy(state.f, state.h, val) if len(val) else float('nan'),
            domain_l_lpft={
                domain.domain_id: nn_core.cross_entropy(
                    nn_core.head_forward(state.h, nn_core.mlp_forward(state.f, domain.train.x)), domain.train.y)
                for domain in sources
            }
        )
        logs.append(log)
        logger.info(f'Epoch {epoch}/{config.epochs} | lr {lr:.2e} | L_lp-ft {log.l_lpft:.4f} | ' +
                    f'L_fr {log.l_fr:.4f} | L_hr {log.l_hr:.4f} | train {log.train_acc:.4f} | val {log.val_acc:.4f}')

        # Strictly greater keeps the earliest epoch on ties
        if best_state is None or log.val_acc > best_acc:
            best_acc, best_epoch, best_state = log.val_acc, epoch, state.copy()

        opt.next_epoch()

    logger.info(f'Selected epoch {best_epoch} (source val acc {best_acc:.4f})')
    return RunRecord(
        variant=spec.variant,
        epochs=logs,
        selected_epoch=best_epoch,
        state=best_state,
        seed=config.seed,
        config_hash=config_hash(config.to_dict()),
        step_trace=trace or []
    )


def run_experiment(bundle: BenchmarkBundle, config: TrainConfig, run_dir: str | Path | None = None,
                   prepared: Prepared | None = None) -> ExperimentResult:
    """
    Pretrain, probe, prototypes, fine-tune, evaluate and analyse one variant

    Parameters
    ----------
    bundle (BenchmarkBundle): The benchmark
    config (TrainConfig): Run config
    run_dir (str | Path): Writes every artifact there when given
    prepared (Prepared): Reuses pretraining and probing from an earlier run with the same seed

    Returns
    ----------
    ExperimentResult: Run record, evaluation and analysis reports
    """

    if prepared is None:
        prepared = prepare(bundle, config)

    record = fine_tune(prepared.state(), bundle.sources, prepared.bank, config)
    eval_report = evaluate(record.state, bundle.target, bundle.class_split)
    analysis = analyze(record.state, bundle)

    result = ExperimentResult(record, eval_report, analysis, prepared.bank, prepared)
    if run_dir is not None:
        result.run_dir = write_experiment(run_dir, result, config)
    return result


def _run_many(bundle: BenchmarkBundle, configs: list[TrainConfig], workers: int = 1,
              run_root: str | Path | None = None, cache: dict | None = None) -> list[ExperimentResult | RpfError]:
    """
    Runs independent experiments, sharing the variant-independent stage per seed. Results keep input order.
    cache maps seed -> Prepared and is only valid across configs that differ in fine-tuning settings
    """

    prepared = {} if cache is None else cache
    for config in configs:
        if config.seed not in prepared:
            try:
                prepared[config.seed] = prepare(bundle, config)
            except RpfError as e:
                logger.error(f'Preparing seed {config.seed} failed: {e}')
                prepared[config.seed] = e

    def run(config: TrainConfig) -> ExperimentResult | RpfError:
        shared = prepared[config.seed]
        if isinstance(shared, RpfError):
            return shared
        run_dir = None
        if run_root is not None:
            run_dir = Path(run_root) / f'{config.variant.value}-lambda{config.lambda_hr:g}-seed{config.seed}'
        try:
            return run_experiment(bundle, config, run_dir, shared)
        except RpfError as e:
            logger.error(f'Run {config.variant.value} (seed {config.seed}) failed: {e}')
            return e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(run, configs))
    return [run(config) for config in configs]


def _seeds(config: TrainConfig, num_seeds: int) -> list[int]:
    if num_seeds < 1:
        raise ConfigError(f'Need at least 1 seed, got {num_seeds}')
    return [config.seed + i for i in range(num_seeds)]


def _summarise(label_column: str, labels: list, results: list[ExperimentResult | RpfError],
               keys: list) -> pd.DataFrame:
    rows = []
    for label in labels:
        runs = [result for key, result in zip(keys, results) if key == label]
        ok = [result for result in runs if not isinstance(result, RpfError)]
        acc = pd.Series([result.eval_report.acc_known for result in ok], dtype=np.float64)
        h = pd.Series([result.eval_report.best_h_score for result in ok], dtype=np.float64)
        rows.append({
            label_column: label,
            'acc_mean': acc.mean(),
            'acc_std': acc.std(),
            'h_score_mean': h.mean(),
            'h_score_std': h.std(),
            'runs': len(ok),
            'status': 'ok' if len(ok) == len(runs) else 'FAILED'
        })
    return pd.DataFrame(rows)


@dataclass
class SuiteResult:
    table: pd.DataFrame
    results: dict[tuple, ExperimentResult | RpfError]

    def successful(self) -> dict[tuple, ExperimentResult]:
        return {key: result for key, result in self.results.items() if not isinstance(result, RpfError)}

    def threshold_table(self) -> pd.DataFrame:
        """
        Threshold sweeps averaged over seeds, one row per (label, threshold)
        """

        frames = []
        for (label, seed), result in self.successful().items():
            frame = result.eval_report.sweep.to_frame()
            frame.insert(0, 'seed', seed)
            frame.insert(0, 'label', getattr(label, 'value', label))
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=['label', 'threshold', 'known_acc', 'open_acc', 'h_score'])

        table = pd.concat(frames, ignore_index=True)
        return table.groupby(['label', 'threshold'], sort=False, as_index=False)[
            ['known_acc', 'open_acc', 'h_score']].mean()

    def matched_pairs(self, a, b) -> list[tuple[int, ExperimentResult, ExperimentResult]]:
        """(seed, run a, run b) for every seed where both labels completed"""

        ok = self.successful()
        seeds = sorted({seed for _, seed in ok})
        return [(seed, ok[(a, seed)], ok[(b, seed)]) for seed in seeds if (a, seed) in ok and (b, seed) in ok]


def run_ablation_suite(bundle: BenchmarkBundle, config: TrainConfig, num_seeds: int = 3, workers: int = 1,
                       run_root: str | Path | None = None, cache: dict | None = None) -> SuiteResult:
    """
    All seven variants over the same seeds

    Returns
    ----------
    SuiteResult: One row per variant in ablation order with mean and std of Acc and best H-score.
    A variant with a failed run is marked FAILED, the other rows are kept
    """

    seeds = _seeds(config, num_seeds)
    keys = [(variant, seed) for variant in ABLATION_ORDER for seed in seeds]
    configs = [config.replace(variant=variant, seed=seed) for variant, seed in keys]

    logger.info(f'Running ablation suite: {len(ABLATION_ORDER)} variants x {len(seeds)} seeds...')
    results = _run_many(bundle, configs, workers, run_root, cache)

    table = _summarise('variant', [v.value for v in ABLATION_ORDER], results, [v.value for v, _ in keys])
    return SuiteResult(table, dict(zip(keys, results)))


def run_lambda_sweep(bundle: BenchmarkBundle, config: TrainConfig, lambdas=DEFAULT_LAMBDAS, num_seeds: int = 3,
                     workers: int = 1, run_root: str | Path | None = None, cache: dict | None = None) -> SuiteResult:
    """
    One RPF run per lambda_hr value and seed

    Returns
    ----------
    SuiteResult: One row per lambda with mean and std of Acc and best H-score
    """

    lambdas = [float(value) for value in lambdas]
    if not lambdas or any(value < 0 for value in lambdas):
        raise ConfigError(f'lambda values must be >= 0, got {lambdas}')

    seeds = _seeds(config, num_seeds)
    keys = [(value, seed) for value in lambdas for seed in seeds]
    configs = [config.replace(variant=Variant.RPF, lambda_hr=value, seed=seed) for value, seed in keys]

    logger.info(f'Running lambda sweep over {lambdas} with {len(seeds)} seeds...')
    results = _run_many(bundle, configs, workers, run_root, cache)

    table = _summarise('lambda_hr', lambdas, results, [value for value, _ in keys])
    return SuiteResult(table, dict(zip(keys, results)))


@dataclass
class CorrelationResult:
    table: pd.DataFrame
    rho_imp1: float
    rho_imp2: float


def head_distance_correlation(pairs: list[tuple[int, ExperimentResult, ExperimentResult]]) -> CorrelationResult:
    """
    Spearman rho of the RPF head distance from h_lp against |delta Imp.1| and |delta Imp.2| between
    matched RPF and LPFT runs

    Parameters
    ----------
    pairs (list[tuple[int, ExperimentResult, ExperimentResult]]): (seed, rpf run, lpft run)

    Returns
    ----------
    CorrelationResult: Per-seed table and both correlations
    """

    rows = []
    for seed, rpf, lpft in pairs:
        a, b = rpf.analysis, lpft.analysis
        if None in (a.imp1, a.imp2, b.imp1, b.imp2):
            logger.warning(f'Skipping seed {seed} in the correlation study, improvement ratios are undefined')
            continue
        rows.append({
            'seed': seed,
            'head_distance': a.head_distance,
            'delta_imp1': abs(a.imp1 - b.imp1),
            'delta_imp2': abs(a.imp2 - b.imp2)
        })

    table = pd.DataFrame(rows, columns=['seed', 'head_distance', 'delta_imp1', 'delta_imp2'])
    if len(table) < 2:
        raise EmptyPopulationError('Fewer than 2 matched runs completed, no correlation to report')

    return CorrelationResult(
        table=table,
        rho_imp1=spearman_rho(table['head_distance'], table['delta_imp1']),
        rho_imp2=spearman_rho(table['head_distance'], table['delta_imp2'])
    )


def run_correlation_study(bundle: BenchmarkBundle, config: TrainConfig, num_seeds: int = 3,
                          workers: int = 1, cache: dict | None = None) -> CorrelationResult:
    """
    Runs RPF and LPFT per seed and correlates the RPF head distance with the improvement-ratio differences
    """

    seeds = _seeds(config, num_seeds)
    if len(seeds) < 2:
        raise ConfigError('The correlation study needs at least 2 seeds')

    keys = [(variant, seed) for seed in seeds for variant in (Variant.RPF, Variant.LPFT)]
    results = _run_many(bundle, [config.replace(variant=v, seed=s) for v, s in keys], workers, cache=cache)

    suite = SuiteResult(pd.DataFrame(), dict(zip(keys, results)))
    return head_distance_correlation(suite.matched_pairs(Variant.RPF, Variant.LPFT))
