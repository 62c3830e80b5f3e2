#!/usr/bin/env python3
"""
Run Configuration Module

Structured parameters of every subcommand, assembled from layered sources.

Sections:
- run      RunSettings   (seed, threads)
- fit      FitConfig     (fitting.py)
- augment  AugmentParams (augment.py)
- render   RenderConfig  (stroke widths, copies per input, bitmap size)
- dataset  DatasetConfig (intersection dataset generation)
- train    TrainConfig   (classifier training)

Precedence, lowest first:
    dataclass defaults < --config JSON file < PATCHFIT_<SECTION>__<FIELD> environment
    variables < --set section.field=value < dedicated flags (--seed, --threads)

Usage:
    from run_config import resolve_run_config
    run = resolve_run_config('run.json', overrides=['fit.iterations=500'], seed=3)
    run.fit.iterations   # 500
"""

import json
import logging
import os
from typing import Any, Dict, List, Mapping, Optional
from dataclasses import MISSING, asdict, dataclass, field, fields

from augment import AugmentParams
from config import ENV_PREFIX, config
from fitting import FitConfig
from intersection import ORACLE_RESOLUTION
from intersection_mlp import DEFAULT_HIDDEN, KEEP_PROB

logger = logging.getLogger(__name__)

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


# =============================================================================
# SECTIONS
# =============================================================================

@dataclass
class RunSettings:
    seed: int = field(default_factory=lambda: config.SEED)
    threads: int = field(default_factory=lambda: config.THREADS)

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError(f"run.threads must be >= 1, got {self.threads}")


@dataclass
class RenderConfig:
    widths: tuple = (1, 2, 3)
    copies: int = 5
    out_size: int = 256

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"render.widths must be a non-empty list of widths >= 1, got {self.widths}")
        if self.copies < 1:
            raise ValueError(f"render.copies must be >= 1, got {self.copies}")
        if self.out_size < 16:
            raise ValueError(f"render.out_size must be >= 16, got {self.out_size}")


@dataclass
class DatasetConfig:
    kind: str = 'self'
    count: int = 10000
    resolution: int = ORACLE_RESOLUTION
    chunk_size: int = 64

    def __post_init__(self):
        if self.kind not in ('self', 'pair'):
            raise ValueError(f"dataset.kind must be 'self' or 'pair', got '{self.kind}'")
        if self.count < 2 or self.resolution < 4 or self.chunk_size < 1:
            raise ValueError("dataset.count must be >= 2, dataset.resolution >= 4 and dataset.chunk_size >= 1")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-4
    keep_prob: float = KEEP_PROB
    hidden_widths: tuple = DEFAULT_HIDDEN
    holdout: float = 0.1
    augment: bool = True

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.batch_size < 1 or not self.lr > 0:
            raise ValueError("train.batch_size must be >= 1 and train.lr > 0")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"train.keep_prob must lie in (0, 1], got {self.keep_prob}")
        if not 0.0 < self.holdout < 1.0:
            raise ValueError(f"train.holdout must lie in (0, 1), got {self.holdout}")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError(f"train.hidden_widths must be positive, got {self.hidden_widths}")


SECTIONS = {
    'run': RunSettings,
    'fit': FitConfig,
    'augment': AugmentParams,
    'render': RenderConfig,
    'dataset': DatasetConfig,
    'train': TrainConfig,
}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    fit: FitConfig = field(default_factory=FitConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    render: RenderConfig = field(default_factory=RenderConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


# =============================================================================
# VALUE PARSING
# =============================================================================

def _field_default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _coerce(section, name, kind, value):
    """Convert a raw value (JSON value or override string) to a field's declared type."""
    where = f"{section}.{name}"
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got '{value}'")
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value}")
            return int(value)
        if kind is float:
            return float(value)
        if kind in (tuple, list):
            if isinstance(value, str):
                text = value.strip()
                value = json.loads(text) if text.startswith('[') else [v for v in text.split(',') if v.strip()]
            return tuple(int(v) for v in value)
        return str(value)
    except (TypeError, json.JSONDecodeError) as e:
        raise ValueError(f"Invalid value for {where}: {e}") from e
    except ValueError as e:
        raise ValueError(f"Invalid value for {where}: {e}") from e


def _field_types(section):
    return {f.name: f.type for f in fields(SECTIONS[section])}


def _apply(layer, section, name, value, source):
    if section not in SECTIONS:
        raise ValueError(f"Unknown config section '{section}' ({source}); expected one of {', '.join(SECTIONS)}")
    types = _field_types(section)
    if name not in types:
        raise ValueError(f"Unknown config field '{section}.{name}' ({source})")
    layer.setdefault(section, {})[name] = _coerce(section, name, types[name], value)


# =============================================================================
# SOURCES
# =============================================================================

def load_config_file(path: str) -> Dict[str, Dict[str, Any]]:
    """Read a JSON run configuration; sections are objects of field values."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, 'r') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValueError(f"Config file {path} must contain a JSON object")
    layer = {}
    for section, values in doc.items():
        if not isinstance(values, dict):
            raise ValueError(f"Config section '{section}' in {path} must be an object")
        for name, value in values.items():
            _apply(layer, section, name, value, path)
    return layer


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Dict[str, Any]]:
    """Values from PATCHFIT_<SECTION>__<FIELD> environment variables."""
    environ = os.environ if environ is None else environ
    layer = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX) or '__' not in key:
            continue
        section, _, name = key[len(ENV_PREFIX):].partition('__')
        _apply(layer, section.lower(), name.lower(), value, key)
    return layer


def parse_overrides(items: List[str]) -> Dict[str, Dict[str, Any]]:
    """Values from 'section.field=value' strings."""
    layer = {}
    for item in items or []:
        target, sep, value = item.partition('=')
        section, dot, name = target.strip().partition('.')
        if not sep or not dot:
            raise ValueError(f"Override '{item}' must look like section.field=value")
        _apply(layer, section, name, value, f"--set {item}")
    return layer


def build_run_config(*layers: Dict[str, Dict[str, Any]]) -> RunConfig:
    """Merge override layers (lowest precedence first) onto the defaults."""
    merged = {name: {} for name in SECTIONS}
    for layer in layers:
        for section, values in layer.items():
            merged[section].update(values)
    run = RunConfig(**{name: cls(**merged[name]) for name, cls in SECTIONS.items()})
    run.fit.validate()
    return run


def resolve_run_config(config_path: Optional[str] = None, overrides: Optional[List[str]] = None,
                       seed: Optional[int] = None, threads: Optional[int] = None,
                       environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Effective RunConfig from every source.

    A dedicated --seed also becomes the fit seed, so every subcommand sees one seed.

    Raises:
        FileNotFoundError: missing config file
        ValueError: unknown keys or invalid values
    """
    layers = []
    if config_path:
        layers.append(load_config_file(config_path))
    layers.append(env_overrides(environ))
    layers.append(parse_overrides(overrides))
    flags = {}
    if seed is not None:
        flags['run'] = {'seed': int(seed)}
        flags['fit'] = {'seed': int(seed)}
    if threads is not None:
        flags.setdefault('run', {})['threads'] = int(threads)
    layers.append(flags)
    run = build_run_config(*layers)
    logger.debug(f"Effective configuration: {json.dumps(run.to_dict(), sort_keys=True)}")
    return run


def write_effective_config(run: RunConfig, out_dir: str) -> str:
    """Echo the effective configuration as effective_config.json; returns the path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, 'effective_config.json')
    with open(path, 'w') as f:
        json.dump(run.to_dict(), f, indent=2, sort_keys=True)
    return path


def describe_fields() -> str:
    """Every section.field with its default, one per line (used by --help)."""
    lines = []
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            default = _field_default(f)
            if isinstance(default, tuple):
                default = ','.join(str(v) for v in default)
            lines.append(f"  {section}.{f.name} = {default}")
    return "\n".join(lines)
