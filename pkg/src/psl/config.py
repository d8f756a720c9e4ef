"""Experiment configuration: strict YAML sections, every default materialised.

The resolved config (a plain dict) is what gets fingerprinted, so any
field that changes results must live here.  Execution-only options such as
``--jobs`` and ``--out`` stay outside it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .analysis import CORRUPTIONS
from .models import ACTIVATIONS, ARCHS, TAP_POINTS


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0},
    "data": {
        "kind": "synthetic",
        "path": None,
        "num_classes": 2,
        "samples_per_class": 400,
        "test_samples_per_class": 200,
        "resolution": 8,
        "precise_amplitude": 0.01,
        "robust_amplitude": 0.08,
        "robust_spread": 1.0,
        "noise": 0.02,
        "max_train": None,
        "max_test": None,
    },
    "model": {"arch": "tiny_cnn", "activation": "relu", "width": 8},
    "train": {
        "epsilons": [0, 2, 4, 8],
        "epochs": 15,
        "batch_size": 64,
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 2e-4,
        "decay_epochs": [10, 13],
        "decay_factor": 0.1,
        "attack_steps": 7,
        "random_start": True,
        "clamp_to_pixel_range": True,
        "val_fraction": 0.1,
        "val_attack_steps": 10,
    },
    "eval": {"deltas": [0, 1, 2, 4, 8], "attack_steps": 20},
    "quant": {
        "taps": list(TAP_POINTS),
        "betas": [8.0],
        "deltas": [0, 2, 4, 8],
        "attacks": ["transfer", "bpda"],
        "attack_steps": 20,
    },
    "analysis": {
        "corruptions": list(CORRUPTIONS),
        "severities": [1, 2, 3, 4, 5],
        "preact_tap": None,
        "corrupt_split": "test",
    },
}

_CHOICES = {
    ("data", "kind"): ("synthetic", "cifar10"),
    ("model", "arch"): ARCHS,
    ("model", "activation"): ACTIVATIONS,
    ("analysis", "corrupt_split"): ("train", "test"),
}


def _check(resolved: dict) -> None:
    for (sec, key), allowed in _CHOICES.items():
        if resolved[sec][key] not in allowed:
            raise ConfigError(f"{sec}.{key}: {resolved[sec][key]!r} not in {list(allowed)}")
    eps = resolved["train"]["epsilons"]
    if not eps or any(b <= a for a, b in zip(eps, eps[1:])) or min(eps) < 0:
        raise ConfigError(f"train.epsilons must be non-negative and strictly increasing, got {eps}")
    for tap in resolved["quant"]["taps"]:
        if tap not in TAP_POINTS:
            raise ConfigError(f"quant.taps: unknown tap {tap!r}")
    for a in resolved["quant"]["attacks"]:
        if a not in ("transfer", "bpda"):
            raise ConfigError(f"quant.attacks: unknown attack {a!r}")
    if any(b <= 0 for b in resolved["quant"]["betas"]):
        raise ConfigError("quant.betas must be positive")
    for kind in resolved["analysis"]["corruptions"]:
        if kind not in CORRUPTIONS:
            raise ConfigError(f"analysis.corruptions: unknown kind {kind!r}")
    if resolved["data"]["kind"] == "cifar10" and not resolved["data"]["path"]:
        raise ConfigError("data.path is required for cifar10")


def resolve(raw: dict | None, seed: int | None = None) -> dict:
    """Overlay ``raw`` on the defaults, rejecting unknown sections and keys."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    resolved = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if section not in resolved:
            raise ConfigError(f"unknown config section {section!r}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{section}: expected a mapping")
        for key, value in values.items():
            if key not in resolved[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            resolved[section][key] = value
    if seed is not None:
        resolved["run"]["seed"] = int(seed)
    _check(resolved)
    return resolved


def load(path: str | Path | None, seed: int | None = None) -> dict:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return resolve(raw, seed)


def fingerprint(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
