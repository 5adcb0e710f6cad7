from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .data_synth import BenchmarkConfig
from .exceptions import ConfigError
from .trainer import TrainConfig

DEFAULT_CONFIG_PATH = Path(__file__).parents[2] / 'config' / 'config.yaml'
SECTIONS = ('benchmark', 'train', 'suite', 'analysis', 'log')


def load_config(path: str | Path | None = None) -> dict:
    """
    Reads the YAML config

    Parameters
    ----------
    path (str | Path): Config file. Defaults to src/config/config.yaml

    Returns
    ----------
    dict: One mapping per section
    """

    path = Path(path or DEFAULT_CONFIG_PATH)
    if not path.is_file():
        raise ConfigError(f'No config file at {path}')

    with open(path, 'r', encoding='utf8') as f:
        try:
            config = yaml.load(f, Loader=yaml.SafeLoader) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f'{path} is not valid YAML: {e}') from None

    unknown = set(config) - set(SECTIONS)
    if unknown:
        raise ConfigError(f'Unknown config sections: {", ".join(sorted(unknown))}')
    return {section: dict(config.get(section) or {}) for section in SECTIONS}


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """
    Applies dotted KEY=VALUE overrides, e.g. train.lr=0.05. Values are parsed as YAML scalars

    Returns
    ----------
    dict: A new config, the input is left untouched
    """

    config = copy.deepcopy(config)
    for override in overrides or []:
        key, separator, raw = override.partition('=')
        section, _, leaf = key.strip().partition('.')
        if not separator or not leaf:
            raise ConfigError(f'Overrides look like section.key=value, got {override!r}')
        if section not in SECTIONS:
            raise ConfigError(f'Unknown config section {section!r} in override {override!r}')

        try:
            value = yaml.load(raw, Loader=yaml.SafeLoader)
        except yaml.YAMLError:
            raise ConfigError(f'Could not parse the value of {override!r}') from None
        config[section][leaf] = value

    return config


def resolve_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    return apply_overrides(load_config(path), overrides or [])


def _coerce(cls, values: dict) -> dict:
    """Casts numeric settings to their field type. YAML reads 1e-3 as a string"""

    types = {f.name: f.type for f in fields(cls)}
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f'Unknown {cls.__name__} settings: {", ".join(sorted(unknown))}')

    coerced = {}
    for key, value in values.items():
        try:
            if types[key] == 'float' or (types[key] == 'float | None' and value is not None):
                value = float(value)
            elif types[key] == 'int':
                value = int(value)
        except (TypeError, ValueError):
            raise ConfigError(f'{key} must be a number, got {value!r}') from None
        coerced[key] = value
    return coerced


def benchmark_config(config: dict, **changes) -> BenchmarkConfig:
    values = {key: value for key, value in config['benchmark'].items() if key != 'seed'}
    values.update({key: value for key, value in changes.items() if value is not None})

    return BenchmarkConfig(**_coerce(BenchmarkConfig, values))


def train_config(config: dict, **changes) -> TrainConfig:
    values = dict(config['train'])
    values.update({key: value for key, value in changes.items() if value is not None})
    return TrainConfig.from_dict(_coerce(TrainConfig, values))
