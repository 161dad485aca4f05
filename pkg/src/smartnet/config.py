"""Run configuration: a flat YAML mapping of dotted keys.

Precedence, lowest to highest: built-in defaults, the config file,
``--set key=value`` overrides, dedicated CLI flags (``--eps`` and friends).
Unknown keys are rejected.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from smartnet.errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output.dir": "runs/default",
    "data.kind": "mnist5k",
    "data.train_images": None,
    "data.train_labels": None,
    "data.test_images": None,
    "data.test_labels": None,
    "data.cifar_train": [],
    "data.cifar_test": [],
    "data.subset": 0,
    "data.augment": False,
    "data.test_samples": 0,
    "model.widths": [8, 16, 32, 64],
    "model.dtype": "float32",
    "masks.pattern": "DDSS",
    "masks.c_clean": 0.5,
    "masks.c_adv": 0.5,
    "masks.c_shared": 0.25,
    "masks.seed": None,
    "train.method": "smart",
    "train.lambda_fixed": 1.0,
    "train.epochs": 8,
    "train.batch_size": 64,
    "train.lr": 0.1,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.eval_samples": 1000,
    "train.checkpoint_every": 1,
    "attack.kind": "pgd",
    "attack.epsilon": 0.1,
    "attack.steps": 7,
    "attack.step_size": None,
    "attack.random_start": False,
    "eval.lambdas": [0.0, 0.2, 0.7, 1.0],
    "eval.seed": 0,
    "eval.batch_size": 100,
    "sensitivity.densities": [0.05, 0.1, 0.2],
    "sensitivity.epochs": 3,
    "sensitivity.seeds": [0],
    "account.arch": "resnet34",
    "account.mac_cost": None,
    "account.add_cost": None,
    "account.shift_add_cost": None,
}

CHOICES = {
    "data.kind": ("mnist5k", "idx", "cifar10"),
    "train.method": ("smart", "pgd-at"),
    "attack.kind": ("pgd", "fgsm"),
    "model.dtype": ("float32", "float64"),
    "account.arch": ("resnet34", "desk"),
}

# float-valued keys whose default is None
FLOAT_KEYS = {"attack.step_size", "account.mac_cost", "account.add_cost", "account.shift_add_cost"}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
    elif isinstance(default, float) or key in FLOAT_KEYS:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    return value


class RunConfig(Mapping):
    """Resolved configuration (defaults included)."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = copy.deepcopy(DEFAULTS)
        self.update(values or {})

    def update(self, values: Mapping[str, Any]) -> None:
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _coerce(key, value)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def to_yaml(self) -> str:
        return yaml.safe_dump(dict(self._values), sort_keys=True, default_flow_style=None)

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a flat mapping")
        for key, value in loaded.items():
            if isinstance(value, dict):
                raise ConfigError(f"nested section {key!r}: use dotted keys like '{key}.x: ...'")
        values.update(loaded)
    cfg = RunConfig(values)
    if overrides:
        cfg.update(overrides)
    return cfg
