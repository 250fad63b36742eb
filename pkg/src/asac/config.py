"""JSON run configs: load, override by dotted path, validate, echo.

A config file is a JSON object mirroring RunConfig, with the model
block nested under "model".  Missing keys take the dataclass defaults,
unknown keys are rejected by path, and the fully resolved config is
echoed into the run directory as a file that reproduces the run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .train import RunConfig

_TUPLE_KEYS = ("attack_kinds", "epsilons", "data_fractions",
               "fewshot_fractions")


def parse_value(raw: str):
    """Parse an override value: JSON if it parses, bare string if not."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, assignments) -> dict:
    """Apply key=value assignments (dotted key paths) to a config doc."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form "
                              "key=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = doc
        for depth, key in enumerate(keys[:-1]):
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError("cannot descend into config key "
                                  f"{'.'.join(keys[:depth + 1])!r}")
            node = child
        node[keys[-1]] = parse_value(raw)
    return doc


def _check_scalar(path: str, value, default):
    # JSON booleans are ints in Python; keep the two kinds apart.
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path!r} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path!r} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path!r} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"config key {path!r} must be a string")
    return value


def config_from_dict(doc: dict) -> RunConfig:
    """Build a validated RunConfig; unknown keys are rejected by path."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    run_defaults = {f.name: f.default for f in fields(RunConfig)}
    model_defaults = {f.name: f.default for f in fields(ModelConfig)}
    for key in doc:
        if key not in run_defaults:
            raise ConfigError(f"unknown config key {key!r}")
    model_doc = doc.get("model", {})
    if not isinstance(model_doc, dict):
        raise ConfigError("config key 'model' must be an object")
    model_kwargs = {}
    for key, value in model_doc.items():
        if key not in model_defaults:
            raise ConfigError(f"unknown config key 'model.{key}'")
        model_kwargs[key] = _check_scalar(f"model.{key}", value,
                                          model_defaults[key])
    kwargs = {}
    for key, value in doc.items():
        if key == "model":
            continue
        if key in _TUPLE_KEYS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"config key {key!r} must be a list")
            if key == "attack_kinds":
                kwargs[key] = tuple(
                    _check_scalar(f"{key}[{i}]", v, "")
                    for i, v in enumerate(value))
            else:
                kwargs[key] = tuple(
                    _check_scalar(f"{key}[{i}]", v, 0.0)
                    for i, v in enumerate(value))
            continue
        kwargs[key] = _check_scalar(key, value, run_defaults[key])
    return RunConfig(model=ModelConfig(**model_kwargs), **kwargs)


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def resolve_config(config_path=None, assignments=(), seed=None,
                   mode=None) -> RunConfig:
    """Config file -> overrides -> --seed -> forced subcommand mode."""
    doc = load_config(config_path) if config_path else {}
    apply_overrides(doc, assignments)
    if seed is not None:
        doc["seed"] = seed
    if mode is not None:
        doc["mode"] = mode
    return config_from_dict(doc)


def resolved_doc(cfg: RunConfig) -> dict:
    return asdict(cfg)


def write_resolved(cfg: RunConfig, path) -> None:
    text = json.dumps(resolved_doc(cfg), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")
