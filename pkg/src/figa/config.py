"""Layered run configuration.

Precedence, lowest to highest: built-in defaults, preset, config file,
environment, command-line flags. Unknown keys are rejected wherever they
appear.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .pipeline import FilterThresholds
from .train import TrainOptions
from .weighting import AnnotatorMode, NllMode, Strategy, WeightConfig

ENV_KEYS = {
    "FIGA_COMPLETION_ENDPOINT": "completion_endpoint",
    "FIGA_REWARD_ENDPOINT": "reward_endpoint",
    "FIGA_ANNOTATOR_ENDPOINT": "annotator_endpoint",
}

_ENUMS = {"nll_mode": NllMode, "strategy": Strategy, "annotator_mode": AnnotatorMode}


@dataclass(frozen=True)
class RunConfig:
    eta1: float = 1.0
    eta2: float = 3.0
    eta3: float = 3.5
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.0
    nll_threshold: float = 0.6
    nll_mode: str = "below"
    strategy: str = "levenshtein"
    annotator_mode: str = "weighted"
    scale_beta: bool = True
    lr: float = 0.1
    epochs: int = 30
    seed: int = 0
    clip: float = 5.0
    batch_size: int = 1
    embed_dim: int = 16
    hidden_dim: int = 32
    completion_endpoint: str | None = None
    completion_model: str = "gpt-3.5-turbo"
    reward_endpoint: str | None = None
    annotator_endpoint: str | None = None
    temperature: float = 0.0
    workers: int = 8
    stub_services: bool = False
    max_decode_len: int = 64

    @property
    def thresholds(self) -> FilterThresholds:
        return FilterThresholds(self.eta1, self.eta2, self.eta3)

    @property
    def weight(self) -> WeightConfig:
        return WeightConfig(self.alpha, self.beta, self.gamma, self.nll_threshold, self.nll_mode, self.strategy)

    @property
    def train_options(self) -> TrainOptions:
        return TrainOptions(self.lr, self.epochs, self.clip, self.seed, self.batch_size)

    def canonical(self) -> dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_TYPES: dict[str, Any] = {}
for _f in fields(RunConfig):
    _TYPES[_f.name] = {"float": float, "int": int, "bool": bool, "str": str, "str | None": (str, type(None))}[
        str(_f.type)
    ]

PRESETS: dict[str, dict[str, Any]] = {
    "figa-default": {"alpha": 1.0, "beta": 0.5, "gamma": 0.0, "nll_mode": "below", "strategy": "levenshtein"},
    "beta-zero": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0},
    "beta-0.25": {"alpha": 1.0, "beta": 0.25, "gamma": 0.0},
    "beta-0.2": {"alpha": 1.0, "beta": 0.2, "gamma": 0.0},
    "gamma-0.3": {"alpha": 1.0, "beta": 0.5, "gamma": 0.3},
    "beta-zero-gamma-0.3": {"alpha": 1.0, "beta": 0.0, "gamma": 0.3},
    "reward-scaled": {"strategy": "reward-scaled", "gamma": 0.0},
    "alpha-reward-beta-0.5": {"strategy": "reward-scaled", "scale_beta": False, "beta": 0.5, "gamma": 0.0},
    "alpha-reward-beta-zero": {"strategy": "reward-scaled", "scale_beta": False, "beta": 0.0, "gamma": 0.0},
    "bag-of-words": {"strategy": "bag-of-words", "alpha": 1.0, "beta": 0.0, "gamma": 0.0},
    "inverted-threshold": {"nll_mode": "inverted"},
    "no-nll-filter": {"nll_mode": "none"},
    "external-weighted": {"strategy": "external", "annotator_mode": "weighted", "beta": 0.0},
    "external-binary": {"strategy": "external", "annotator_mode": "binary", "beta": 0.0},
}


def preset(name: str) -> dict[str, Any]:
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


def _check(key: str, value: Any, source: str) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown key {key!r} in {source}")
    expected = _TYPES[key]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if expected is int and isinstance(value, bool) or not isinstance(value, expected):
        raise ConfigError(f"key {key!r} in {source} has type {type(value).__name__}")
    if key in _ENUMS:
        try:
            _ENUMS[key](value)
        except ValueError:
            choices = ", ".join(m.value for m in _ENUMS[key])
            raise ConfigError(f"key {key!r} in {source} must be one of {choices}, got {value!r}") from None
    return value


def load_config_file(path: str | os.PathLike) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a flat object")
    return data


def resolve_config(
    file: str | os.PathLike | Mapping[str, Any] | None = None,
    flags: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge the configuration layers into a concrete :class:`RunConfig`.

    ``flags`` entries set to None count as "not given". A ``preset`` key may
    appear in the file or the flags; the higher layer's preset wins and is
    applied directly above the defaults.
    """
    if file is None:
        file_values: dict[str, Any] = {}
        file_source = "config file"
    elif isinstance(file, Mapping):
        file_values, file_source = dict(file), "config file"
    else:
        file_values, file_source = load_config_file(file), f"config file {file}"
    flag_values = {k: v for k, v in (flags or {}).items() if v is not None}
    env = os.environ if env is None else env
    env_values = {key: env[var] for var, key in ENV_KEYS.items() if env.get(var)}

    preset_name = flag_values.pop("preset", None) or None
    file_preset = file_values.pop("preset", None)
    if preset_name is None:
        preset_name = file_preset
    layers: list[tuple[str, dict[str, Any]]] = []
    if preset_name is not None:
        if not isinstance(preset_name, str):
            raise ConfigError("preset must be a string")
        layers.append((f"preset {preset_name}", preset(preset_name)))
    layers += [(file_source, file_values), ("environment", env_values), ("flags", flag_values)]

    merged: dict[str, Any] = {}
    for source, values in layers:
        for key, value in values.items():
            merged[key] = _check(key, value, source)
    try:
        cfg = RunConfig(**merged)
        cfg.weight, cfg.train_options  # validate
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg
