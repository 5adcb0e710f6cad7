from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from . import nn_core
from .data_synth import DomainDataset, DomainSplit, ensure_trainable
from .exceptions import ConfigError, EmptyPopulationError, FrozenParameterError, MissingStateError, ShapeError
from .misc_utils import checksum

logger = logging.getLogger('rpf.losses')


class Variant(str, Enum):
    LPFT = 'lpft'
    NO_HR = 'no_hr'
    NO_FR = 'no_fr'
    NO_PRETRAINED_HEAD = 'no_pretrained_head'
    HR_F = 'hr_f'
    ENT_MIN_HR = 'ent_min_hr'
    RPF = 'rpf'

    @classmethod
    def from_name(cls, name: str | Variant) -> Variant:
        """
        Resolves a variant from its config/CLI name

        Parameters
        ----------
        name (str): e.g. 'rpf', 'RPF', 'no-hr'

        Returns
        ----------
        Variant: The variant
        """

        if isinstance(name, Variant):
            return name
        try:
            return cls(str(name).lower().replace('-', '_'))
        except ValueError:
            raise ConfigError(f'Unknown variant {name!r}, expected one of {", ".join(v.value for v in cls)}') from None


# Row order of the ablation table
ABLATION_ORDER = (Variant.LPFT, Variant.NO_HR, Variant.NO_FR, Variant.NO_PRETRAINED_HEAD,
                  Variant.HR_F, Variant.ENT_MIN_HR, Variant.RPF)

_HR_TERMS = {
    Variant.NO_FR: 'hr',
    Variant.NO_PRETRAINED_HEAD: 'hr',
    Variant.HR_F: 'hr_f',
    Variant.ENT_MIN_HR: 'ent_min_hr',
    Variant.RPF: 'hr'
}
_FR_VARIANTS = (Variant.NO_HR, Variant.NO_PRETRAINED_HEAD, Variant.HR_F, Variant.ENT_MIN_HR, Variant.RPF)


@dataclass(frozen=True)
class LossSpec:
    variant: Variant = Variant.RPF
    lambda_hr: float = 0.1
    fr_weight: float = 1.0
    fr_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'variant', Variant.from_name(self.variant))
        if self.lambda_hr < 0:
            raise ConfigError(f'lambda_hr must be >= 0, got {self.lambda_hr}')
        if self.fr_weight < 0:
            raise ConfigError(f'fr_weight must be >= 0, got {self.fr_weight}')

    @property
    def has_fr(self) -> bool:
        return self.fr_enabled and self.variant in _FR_VARIANTS

    @property
    def hr_term(self) -> str | None:
        return _HR_TERMS.get(self.variant)

    @property
    def requires_probe_head(self) -> bool:
        return self.variant != Variant.NO_PRETRAINED_HEAD

    def coefficients(self) -> dict[str, float]:
        coefficients = {'lpft': 1.0}
        if self.has_fr:
            coefficients['fr'] = self.fr_weight
        if self.hr_term:
            coefficients[self.hr_term] = self.lambda_hr
        return coefficients


@dataclass(frozen=True)
class PrototypeBank:
    """One fixed prototype row per known class, plus the sample counts behind each row"""

    prototypes: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        for array in (self.prototypes, self.counts):
            array.flags.writeable = False

    @property
    def num_classes(self) -> int:
        return len(self.prototypes)

    def checksum(self) -> str:
        return checksum(self.prototypes, self.counts)

    def to_csv(self, path: str | Path) -> None:
        frame = pd.DataFrame(self.prototypes, columns=[f'p{i}' for i in range(self.prototypes.shape[1])])
        frame.insert(0, 'class_id', np.arange(self.num_classes))
        frame.to_csv(path, index=False)


@dataclass
class LossBreakdown:
    total: float
    lpft: float = 0.0
    fr: float = 0.0
    hr: float = 0.0


def compute_prototypes(f0: nn_core.MlpParams, sources: list[DomainSplit | DomainDataset],
                       num_classes: int | None = None) -> PrototypeBank:
    """
    P_c = mean of f0(x) over every training sample of class c, pooled across all source domains

    Parameters
    ----------
    f0 (nn_core.MlpParams): The frozen pretrained extractor
    sources (list[DomainSplit | DomainDataset]): Source domains. Only training splits are read
    num_classes (int): Number of known classes. Defaults to the largest label + 1

    Returns
    ----------
    PrototypeBank: The fixed prototypes
    """

    if not f0.frozen:
        raise FrozenParameterError('Prototypes must be computed from the frozen f0')

    datasets = [source.train if isinstance(source, DomainSplit) else source for source in sources]
    ensure_trainable(*datasets)

    if num_classes is None:
        num_classes = int(max(dataset.y.max() for dataset in datasets if len(dataset))) + 1

    sums = np.zeros((num_classes, f0.feature_dim))
    counts = np.zeros(num_classes, dtype=np.int64)
    for dataset in datasets:
        if not len(dataset):
            continue
        features = nn_core.mlp_forward(f0, dataset.x)
        for c in range(num_classes):
            mask = dataset.y == c
            if mask.any():
                sums[c] += features[mask].sum(axis=0)
                counts[c] += int(mask.sum())

    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise EmptyPopulationError(f'Class {int(empty[0])} has no source training samples to build a prototype from')

    return PrototypeBank(prototypes=sums / counts[:, None], counts=counts)


def loss_fr(f: nn_core.MlpParams, x: np.ndarray, y: np.ndarray, bank: PrototypeBank) -> float:
    """
    Batch mean of ||f(x) - P_y||^2 (squared L2 summed over dimensions)
    """

    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= bank.num_classes):
        raise MissingStateError(f'No prototype row for labels outside [0, {bank.num_classes})')

    diff = nn_core.mlp_forward(f, x) - bank.prototypes[y]
    return float((diff * diff).sum(axis=1).mean())


def loss_hr(h: nn_core.HeadParams, f0_features: np.ndarray) -> float:
    """
    Batch mean of sum_c p_c log p_c with p = softmax(h(f0(x))), the negative entropy.
    Lies in [-ln C, 0]
    """

    probs = nn_core.softmax(nn_core.head_forward(h, np.atleast_2d(f0_features)))
    return float(nn_core.negative_entropy(probs).mean())


def loss_hr_variant(variant: Variant | str, state: nn_core.ModelState, x: np.ndarray) -> float:
    """
    HR_F: the entropy term on the live extractor's features.
    ENT_MIN_HR: the negated entropy term on f0 features (entropy minimisation)
    """

    variant = Variant.from_name(variant)
    if variant == Variant.HR_F:
        return loss_hr(state.h, nn_core.mlp_forward(state.f, x))
    if variant == Variant.ENT_MIN_HR:
        if state.f0 is None:
            raise MissingStateError('Entropy minimisation needs f0')
        return -loss_hr(state.h, nn_core.mlp_forward(state.f0, x))
    raise ConfigError(f'{variant.value} is not a head-regularisation variant')


def combine(lpft: float, fr: float, hr: float, spec: LossSpec) -> float:
    """L_lp-ft + [FR] fr_weight * L_fr + [HR] lambda_hr * L_hr, summed in that order"""

    total = 0.0
    total += lpft
    if spec.has_fr:
        total += spec.fr_weight * fr
    if spec.hr_term:
        total += spec.lambda_hr * hr
    return total


def loss_total(state: nn_core.ModelState, batch: nn_core.Batch, bank: PrototypeBank | None,
               spec: LossSpec) -> LossBreakdown:
    """
    Total objective of a variant and its components

    Returns
    ----------
    LossBreakdown: total plus the unweighted L_lp-ft, L_fr and head term (0.0 when inactive)
    """

    if batch.x.ndim != 2:
        raise ShapeError('loss_total expects a 2-D batch')

    _, components = nn_core.loss_value(state, batch, spec, None if bank is None else bank.prototypes)
    lpft = components.get('lpft', 0.0)
    fr = components.get('fr', 0.0)
    hr = components.get(spec.hr_term, 0.0) if spec.hr_term else 0.0
    return LossBreakdown(total=combine(lpft, fr, hr, spec), lpft=lpft, fr=fr, hr=hr)
