"""Run configuration: JSON sections with defaults, strict key checking, logging."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict[str, dict] = {
    "lm": {
        "preset": "small",
        "seed": 42,
    },
    "prompts": {
        "set": "default",  # "default" (the 7 long-input prompts), "builtin" (all 9), or "file"
        "file": None,
    },
    "store": {
        "shard_size": 4096,
    },
    "vit": {
        "image_size": 64,
        "patch_size": 16,
        "d_v": 64,
        "n_layers": 2,
        "n_heads": 4,
        "global_pool": "cls",
        "seed": 1,
    },
    "train": {
        "batch_size": 64,
        "steps": 500,
        "lr": 1e-3,
        "weight_decay": 0.1,
        "beta1": 0.9,
        "beta2": 0.98,
        "eps": 1e-8,
        "warmup": 100,
        "schedule": "cosine",
        "seed": 0,
        "tau_init": 0.07,
    },
    "eval": {
        "ks": [1, 5, 10],
        "text_mode": "short",  # or "mean"
        "template": "a photo of a {label}",
    },
}


def _merge(section: str, defaults: dict, overrides: dict, path: str) -> dict:
    out = dict(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigError(f"{path}: unknown key {section}.{key}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(f"{section}.{key}", defaults[key], value, path)
        else:
            out[key] = value
    return out


def resolve(config_path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the config file, then programmatic overrides; rejects
    unknown keys at every level."""
    resolved = {k: dict(v) for k, v in DEFAULTS.items()}

    def apply(doc: dict, origin: str) -> None:
        for section, content in doc.items():
            if section not in resolved:
                raise ConfigError(f"{origin}: unknown config section {section!r}")
            if not isinstance(content, dict):
                raise ConfigError(f"{origin}: section {section!r} must be an object")
            resolved[section] = _merge(section, resolved[section], content, origin)

    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        apply(doc, str(config_path))
    if overrides:
        apply(overrides, "<cli>")
    return resolved


def dump(resolved: dict) -> str:
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"
