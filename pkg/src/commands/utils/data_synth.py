from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.linalg import expm

from .exceptions import BenchmarkNotFoundError, ClassSplitError, ConfigError, SingularTransformError, TargetLeakError
from .misc_utils import rng_stream

logger = logging.getLogger('rpf.data')

MAX_CONDITION_NUMBER = 1e6


def _span(start: int, stop: int) -> list[int]:
    """Inclusive integer range, the way the protocol tables write class ids"""

    return list(range(start, stop + 1))


PRESETS = {
    'pacs-like': {
        'sources': [[3, 0, 1], [4, 0, 2], [5, 1, 2]],
        'target_known': _span(0, 5),
        'open_classes': [6]
    },
    'office-home-like': {
        'sources': [
            _span(0, 2) + _span(3, 8) + _span(9, 14) + _span(21, 31),
            _span(0, 2) + _span(3, 8) + _span(15, 20) + _span(32, 42),
            _span(0, 2) + _span(9, 14) + _span(15, 20) + _span(43, 53)
        ],
        'target_known': [0, 3, 4, 9, 10, 15, 16] + _span(21, 23) + _span(32, 34) + _span(43, 45),
        'open_classes': _span(54, 64)
    },
    'multi-datasets-like': {
        'sources': [_span(0, 30), [1] + _span(31, 41), [31, 33, 34, 41] + _span(42, 47)],
        'target_known': [0, 1, 5, 6, 10, 11, 14, 17, 20, 26] + _span(31, 36) + _span(39, 43) + [45, 46],
        'open_classes': _span(48, 67)
    }
}


class Role(str, Enum):
    SOURCE = 'source'
    SOURCE_TRAIN = 'source-train'
    SOURCE_VAL = 'source-val'
    TARGET = 'target'
    PRETEXT = 'pretext'
    PRETEXT_TRAIN = 'pretext-train'
    PRETEXT_VAL = 'pretext-val'


@dataclass(frozen=True)
class ClassSplit:
    source_label_sets: tuple[tuple[int, ...], ...]
    target_known: tuple[int, ...]
    open_class_ids: tuple[int, ...]

    @property
    def known_classes(self) -> tuple[int, ...]:
        """C, the sorted union of the source label sets"""

        return tuple(sorted(set().union(*self.source_label_sets)))

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    @property
    def open_sentinel(self) -> int:
        """The single label every open class collapses to at evaluation"""

        return self.num_known

    @property
    def total_classes(self) -> int:
        return max((*self.known_classes, *self.open_class_ids)) + 1

    @property
    def target_classes(self) -> tuple[int, ...]:
        return tuple(sorted((*self.target_known, *self.open_class_ids)))

    def to_dict(self) -> dict:
        return {
            'sources': [list(label_set) for label_set in self.source_label_sets],
            'target_known': list(self.target_known),
            'open_classes': list(self.open_class_ids)
        }


@dataclass
class DomainSpec:
    domain_id: str
    A: np.ndarray
    t: np.ndarray
    noise_scale: float
    samples_per_class: int
    classes: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            'domain_id': self.domain_id,
            'A': self.A.tolist(),
            't': self.t.tolist(),
            'noise_scale': self.noise_scale,
            'samples_per_class': self.samples_per_class,
            'classes': list(self.classes)
        }


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    domain_id: str


@dataclass
class DomainDataset:
    domain_id: str
    role: Role
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self):
        for x, y in zip(self.x, self.y):
            yield Sample(x=x, y=int(y), domain_id=self.domain_id)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.y))

    def subset(self, indices: np.ndarray, role: Role | None = None) -> DomainDataset:
        return DomainDataset(self.domain_id, role or self.role, self.x[indices], self.y[indices])

    def where(self, mask: np.ndarray) -> DomainDataset:
        return self.subset(np.flatnonzero(mask))


@dataclass
class DomainSplit:
    """A source-like domain with its stratified train/validation split"""

    domain_id: str
    train: DomainDataset
    val: DomainDataset


@dataclass
class BenchmarkConfig:
    preset: str | None = 'pacs-like'
    sources: list[list[int]] | None = None
    target_known: list[int] | None = None
    open_classes: list[int] | None = None
    input_dim: int = 16
    samples_per_class: int = 60
    noise_scale: float = 1.0
    mean_scale: float = 2.5
    min_separation: float = 4.0
    source_rotation: float = 0.35
    source_scale_range: tuple[float, float] = (0.7, 1.3)
    source_translation: float = 0.5
    target_rotation: float = 0.7
    target_scale_range: tuple[float, float] = (0.5, 1.5)
    target_translation: float = 1.0
    val_fraction: float = 0.1
    pretext_class_factor: int = 2
    pretext_styles: int = 3
    pretext_samples_per_class: int = 60

    def __post_init__(self):
        self.source_scale_range = tuple(self.source_scale_range)
        self.target_scale_range = tuple(self.target_scale_range)

        if self.input_dim < 1 or self.samples_per_class < 1 or self.pretext_samples_per_class < 1:
            raise ConfigError('input_dim and the sample counts must be positive')
        if self.noise_scale < 0:
            raise ConfigError(f'noise_scale must be >= 0, got {self.noise_scale}')
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f'val_fraction must lie in (0, 1), got {self.val_fraction}')
        if self.pretext_class_factor < 1 or self.pretext_styles < 1:
            raise ConfigError('pretext_class_factor and pretext_styles must be >= 1')

        source_lo, source_hi = self.source_scale_range
        target_lo, target_hi = self.target_scale_range
        if not 0 < source_lo <= source_hi:
            raise ConfigError(f'Invalid source_scale_range {self.source_scale_range}')
        if not (0 < target_lo < source_lo and target_hi > source_hi):
            raise ConfigError('target_scale_range must extend beyond source_scale_range on both sides ' +
                              f'(got {self.target_scale_range} around {self.source_scale_range})')

    def class_split(self) -> ClassSplit:
        if self.sources is not None:
            return build_class_split(sources=self.sources, target_known=self.target_known,
                                     open_classes=self.open_classes)
        return build_class_split(self.preset)


@dataclass
class BenchmarkBundle:
    sources: list[DomainSplit]
    target: DomainDataset
    class_split: ClassSplit
    class_means: np.ndarray
    pretext: DomainSplit
    config: BenchmarkConfig
    seed: int
    domain_specs: dict[str, DomainSpec] = field(default_factory=dict)

    def source_train(self) -> DomainDataset:
        return concat_datasets([domain.train for domain in self.sources], 'sources', Role.SOURCE_TRAIN)

    def source_val(self) -> DomainDataset:
        return concat_datasets([domain.val for domain in self.sources], 'sources', Role.SOURCE_VAL)

    def target_known(self) -> DomainDataset:
        return self.target.where(np.isin(self.target.y, self.class_split.known_classes))

    def target_open(self) -> DomainDataset:
        return self.target.where(~np.isin(self.target.y, self.class_split.known_classes))


def concat_datasets(datasets: list[DomainDataset], domain_id: str, role: Role) -> DomainDataset:
    return DomainDataset(domain_id, role, np.concatenate([d.x for d in datasets]),
                         np.concatenate([d.y for d in datasets]))


def ensure_trainable(*datasets: DomainDataset) -> None:
    """
    Guards every training and model-selection entry point against target data

    Raises
    ----------
    TargetLeakError: If any dataset is tagged as target
    """

    for dataset in datasets:
        if dataset.role == Role.TARGET:
            raise TargetLeakError(f'Target domain {dataset.domain_id!r} must never reach training or model selection')


def build_class_split(
    preset: str | None = None,
    *,
    sources: list[list[int]] | None = None,
    target_known: list[int] | None = None,
    open_classes: list[int] | None = None
) -> ClassSplit:
    """
    Builds and validates an open-domain class split, from a preset or from custom sets

    Parameters
    ----------
    preset (str): One of PRESETS
    sources (list[list[int]]): Custom source label sets (order preserved)
    target_known (list[int]): Known classes present in the target. Defaults to all of C
    open_classes (list[int]): Target-only classes

    Returns
    ----------
    ClassSplit: The validated split
    """

    if sources is None:
        if preset not in PRESETS:
            raise ClassSplitError(f'Unknown preset {preset!r}. Available presets: {", ".join(PRESETS)}')
        return build_class_split(**PRESETS[preset])

    if len(sources) < 1 or any(len(label_set) == 0 for label_set in sources):
        raise ClassSplitError('Every source domain needs a non-empty label set')

    source_label_sets = tuple(tuple(int(c) for c in dict.fromkeys(label_set)) for label_set in sources)
    known = sorted(set().union(*source_label_sets))
    if known != list(range(len(known))):
        raise ClassSplitError(f'Known classes must be the contiguous range 0..{len(known) - 1}, got {known}')

    target_known = tuple(sorted(set(known if target_known is None else target_known)))
    open_class_ids = tuple(sorted(set(open_classes or ())))

    missing = set(target_known) - set(known)
    if missing:
        raise ClassSplitError(f'Target-known classes {sorted(missing)} are absent from every source domain')
    overlap = set(open_class_ids) & set(known)
    if overlap:
        raise ClassSplitError(f'Open classes {sorted(overlap)} also appear in a source domain')
    if any(c < 0 for c in open_class_ids):
        raise ClassSplitError('Class ids must be non-negative')
    if not open_class_ids:
        logger.warning('Class split has no open classes, H-scores will be flagged as undefined')

    return ClassSplit(source_label_sets, target_known, open_class_ids)


def draw_class_means(num_classes: int, dim: int, scale: float, min_distance: float,
                     rng: np.random.Generator, max_attempts: int = 10_000) -> np.ndarray:
    """Gaussian class means, redrawn until every pair is at least min_distance apart"""

    means = []
    attempts = 0
    while len(means) < num_classes:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigError(f'Could not place {num_classes} class means {min_distance} apart, ' +
                              'raise benchmark.mean_scale or lower benchmark.min_separation')
        candidate = rng.normal(0.0, scale, size=dim)
        if all(np.linalg.norm(candidate - mean) >= min_distance for mean in means):
            means.append(candidate)
    return np.stack(means)


def draw_transform(rng: np.random.Generator, dim: int, rotation: float, scale_range: tuple[float, float],
                   translation: float, exclude_range: tuple[float, float] | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """
    Random rotation (exponential of a scaled skew-symmetric matrix) times per-axis scaling, plus a translation.

    With exclude_range the per-axis scales are drawn from scale_range minus exclude_range, which keeps
    target styles disjoint from source styles

    Returns
    ----------
    tuple[np.ndarray, np.ndarray]: A of shape (dim, dim) and t of shape (dim,)
    """

    generator = rng.normal(size=(dim, dim))
    skew = (generator - generator.T) * (rotation / np.sqrt(2 * dim))
    rotation_matrix = expm(skew)

    lo, hi = scale_range
    if exclude_range is None:
        scales = rng.uniform(lo, hi, size=dim)
    else:
        low_side = rng.uniform(lo, exclude_range[0], size=dim)
        high_side = rng.uniform(exclude_range[1], hi, size=dim)
        scales = np.where(rng.random(dim) < 0.5, low_side, high_side)

    return rotation_matrix @ np.diag(scales), rng.normal(0.0, translation, size=dim)


def generate_domain(spec: DomainSpec, role: Role, class_means: np.ndarray, seed: int) -> DomainDataset:
    """
    Draws samples_per_class points x = A (mu_c + eps) + t, eps ~ N(0, noise_scale^2 I), for every class of the spec

    Parameters
    ----------
    spec (DomainSpec): Transform, noise and classes of the domain
    role (Role): Role tag of the produced dataset
    class_means (np.ndarray): Latent class means, one row per class id
    seed (int): Root seed

    Returns
    ----------
    DomainDataset: Samples grouped by class in ascending class order
    """

    condition = np.linalg.cond(spec.A)
    if not np.isfinite(condition) or condition >= MAX_CONDITION_NUMBER:
        raise SingularTransformError(f'Transform of domain {spec.domain_id!r} is singular (condition number {condition:.3g})')

    missing = [c for c in spec.classes if c >= len(class_means)]
    if missing:
        raise ConfigError(f'No class mean for classes {missing} of domain {spec.domain_id!r}')

    rng = rng_stream(seed, 'data', 'samples', spec.domain_id)
    xs, ys = [], []
    for c in sorted(spec.classes):
        noise = rng.normal(0.0, spec.noise_scale, size=(spec.samples_per_class, class_means.shape[1]))
        xs.append((class_means[c] + noise) @ spec.A.T + spec.t)
        ys.append(np.full(spec.samples_per_class, c, dtype=np.int64))

    return DomainDataset(spec.domain_id, role, np.concatenate(xs), np.concatenate(ys))


def split_train_val(dataset: DomainDataset, fraction: float, seed: int,
                    roles: tuple[Role, Role] = (Role.SOURCE_TRAIN, Role.SOURCE_VAL)
                    ) -> tuple[DomainDataset, DomainDataset]:
    """
    Stratified split. Each class with N_c samples gives round(fraction * N_c) to validation,
    at least 1 when N_c >= 2 and never all of them

    Returns
    ----------
    tuple[DomainDataset, DomainDataset]: (train, val), both in original sample order
    """

    if not 0 < fraction < 1:
        raise ConfigError(f'Validation fraction must lie in (0, 1), got {fraction}')

    rng = rng_stream(seed, 'split', dataset.domain_id)
    val_indices = []
    for c in dataset.classes:
        indices = np.flatnonzero(dataset.y == c)
        if len(indices) < 2:
            logger.warning(f'Class {c} of {dataset.domain_id} has a single sample, it contributes nothing to validation')
            continue
        n_val = min(max(int(np.floor(fraction * len(indices) + 0.5)), 1), len(indices) - 1)
        val_indices.extend(rng.permutation(indices)[:n_val])

    is_val = np.zeros(len(dataset), dtype=bool)
    is_val[np.asarray(val_indices, dtype=np.int64)] = True
    return dataset.subset(np.flatnonzero(~is_val), roles[0]), dataset.subset(np.flatnonzero(is_val), roles[1])


def generate_benchmark(config: BenchmarkConfig, seed: int) -> BenchmarkBundle:
    """
    Generates sources, target and pretext data for one open-domain benchmark

    Parameters
    ----------
    config (BenchmarkConfig): Generation parameters
    seed (int): Root seed, every domain draws from its own named stream

    Returns
    ----------
    BenchmarkBundle: The generated benchmark
    """

    class_split = config.class_split()
    if len(class_split.source_label_sets) < 2:
        raise ConfigError('An open-domain benchmark needs at least 2 source domains')

    num_pretext_classes = config.pretext_class_factor * class_split.total_classes
    class_means = draw_class_means(num_pretext_classes, config.input_dim, config.mean_scale,
                                   config.min_separation * config.noise_scale, rng_stream(seed, 'data', 'means'))

    logger.info(f'Generating benchmark with {len(class_split.source_label_sets)} sources, ' +
                f'{class_split.num_known} known and {len(class_split.open_class_ids)} open classes...')

    specs = {}
    sources = []
    for k, label_set in enumerate(class_split.source_label_sets, start=1):
        domain_id = f'source-{k}'
        A, t = draw_transform(rng_stream(seed, 'data', 'transform', domain_id), config.input_dim,
                              config.source_rotation, config.source_scale_range, config.source_translation)
        specs[domain_id] = DomainSpec(domain_id, A, t, config.noise_scale, config.samples_per_class, label_set)
        dataset = generate_domain(specs[domain_id], Role.SOURCE, class_means, seed)
        train, val = split_train_val(dataset, config.val_fraction, seed)
        sources.append(DomainSplit(domain_id, train, val))

    A, t = draw_transform(rng_stream(seed, 'data', 'transform', 'target'), config.input_dim, config.target_rotation,
                          config.target_scale_range, config.target_translation, exclude_range=config.source_scale_range)
    specs['target'] = DomainSpec('target', A, t, config.noise_scale, config.samples_per_class,
                                 class_split.target_classes)
    target = generate_domain(specs['target'], Role.TARGET, class_means, seed)

    styles = []
    for style in range(config.pretext_styles):
        domain_id = f'pretext-{style + 1}'
        A, t = draw_transform(rng_stream(seed, 'data', 'transform', domain_id), config.input_dim,
                              config.source_rotation, config.source_scale_range, config.source_translation)
        specs[domain_id] = DomainSpec(domain_id, A, t, config.noise_scale, config.pretext_samples_per_class,
                                      tuple(range(num_pretext_classes)))
        styles.append(generate_domain(specs[domain_id], Role.PRETEXT, class_means, seed))
    pretext_train, pretext_val = split_train_val(concat_datasets(styles, 'pretext', Role.PRETEXT),
                                                 config.val_fraction, seed, (Role.PRETEXT_TRAIN, Role.PRETEXT_VAL))

    return BenchmarkBundle(
        sources=sources,
        target=target,
        class_split=class_split,
        class_means=class_means,
        pretext=DomainSplit('pretext', pretext_train, pretext_val),
        config=config,
        seed=seed,
        domain_specs=specs
    )


def _frame(datasets: list[DomainDataset]) -> pd.DataFrame:
    frames = []
    for dataset in [dataset for dataset in datasets if len(dataset)] or datasets[:1]:
        frame = pd.DataFrame(dataset.x, columns=[f'x{i}' for i in range(dataset.x.shape[1])])
        frame.insert(0, 'y', dataset.y)
        frame.insert(0, 'role', dataset.role.value)
        frame.insert(0, 'domain_id', dataset.domain_id)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _datasets_from_frame(frame: pd.DataFrame) -> dict[str, DomainDataset]:
    x_columns = [column for column in frame.columns if column.startswith('x')]
    datasets = {}
    for role, rows in frame.groupby('role', sort=False):
        datasets[role] = DomainDataset(str(rows['domain_id'].iloc[0]), Role(role),
                                       rows[x_columns].to_numpy(dtype=np.float64),
                                       rows['y'].to_numpy(dtype=np.int64))
    return datasets


def save_benchmark(bundle: BenchmarkBundle, out_dir: str | Path, run: dict | None = None) -> list[Path]:
    """
    Writes one CSV per domain (domain_id,role,y,x0..x{D-1}) and a JSON manifest.
    run is stored under the manifest's "run" key when given

    Returns
    ----------
    list[Path]: The written files, manifest last
    """

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for domain in bundle.sources:
        path = out_dir / f'{domain.domain_id.replace("-", "_")}.csv'
        _frame([domain.train, domain.val]).to_csv(path, index=False)
        written.append(path)
    for name, datasets in (('target', [bundle.target]), ('pretext', [bundle.pretext.train, bundle.pretext.val])):
        _frame(datasets).to_csv(out_dir / f'{name}.csv', index=False)
        written.append(out_dir / f'{name}.csv')

    config = asdict(bundle.config)
    manifest = {
        'seed': bundle.seed,
        'class_split': bundle.class_split.to_dict(),
        'config': config,
        'domains': {domain_id: spec.to_dict() for domain_id, spec in bundle.domain_specs.items()},
        'class_means': bundle.class_means.tolist(),
        'files': [path.name for path in written]
    }
    if run is not None:
        manifest['run'] = run
    with open(out_dir / 'manifest.json', 'w', encoding='utf8') as f:
        json.dump(manifest, f, indent=2)
    written.append(out_dir / 'manifest.json')

    return written


def load_benchmark(bench_dir: str | Path) -> BenchmarkBundle:
    """
    Reads a benchmark written by save_benchmark

    Raises
    ----------
    BenchmarkNotFoundError: If the directory or its manifest does not exist
    """

    bench_dir = Path(bench_dir)
    manifest_path = bench_dir / 'manifest.json'
    if not manifest_path.is_file():
        raise BenchmarkNotFoundError(f'No benchmark manifest at {manifest_path}')

    with open(manifest_path, 'r', encoding='utf8') as f:
        manifest = json.load(f)

    config = BenchmarkConfig(**manifest['config'])
    split = manifest['class_split']
    class_split = build_class_split(sources=split['sources'], target_known=split['target_known'],
                                    open_classes=split['open_classes'])

    def read(name: str) -> dict[str, DomainDataset]:
        return _datasets_from_frame(pd.read_csv(bench_dir / name, float_precision='round_trip'))

    def pick(datasets: dict[str, DomainDataset], domain_id: str, role: Role) -> DomainDataset:
        # Splits with no rows leave nothing in the CSV
        empty = DomainDataset(domain_id, role, np.empty((0, config.input_dim)), np.empty(0, dtype=np.int64))
        return datasets.get(role.value, empty)

    sources = []
    for k in range(1, len(class_split.source_label_sets) + 1):
        datasets = read(f'source_{k}.csv')
        domain_id = f'source-{k}'
        sources.append(DomainSplit(domain_id, pick(datasets, domain_id, Role.SOURCE_TRAIN),
                                   pick(datasets, domain_id, Role.SOURCE_VAL)))
    target = pick(read('target.csv'), 'target', Role.TARGET)
    pretext = read('pretext.csv')

    specs = {
        domain_id: DomainSpec(domain_id, np.asarray(spec['A']), np.asarray(spec['t']), spec['noise_scale'],
                              spec['samples_per_class'], tuple(spec['classes']))
        for domain_id, spec in manifest['domains'].items()
    }

    return BenchmarkBundle(
        sources=sources,
        target=target,
        class_split=class_split,
        class_means=np.asarray(manifest['class_means'], dtype=np.float64),
        pretext=DomainSplit('pretext', pick(pretext, 'pretext', Role.PRETEXT_TRAIN),
                            pick(pretext, 'pretext', Role.PRETEXT_VAL)),
        config=config,
        seed=manifest['seed'],
        domain_specs=specs
    )
