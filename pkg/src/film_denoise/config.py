"""Experiment configuration files: JSON loading, exhaustive validation,
defaults resolution.

Validation never stops at the first problem; every violation in the file is
collected and reported together.  Relative paths are resolved against the
config file's own directory.  The fully resolved configuration (defaults
filled in, paths absolute) is what gets hashed and echoed beside outputs.
"""

from __future__ import annotations

import json
from pathlib import Path

from .model import PRESETS, ModelConfig
from .noise import NOISE_KINDS, NoiseDistribution

__all__ = [
    "ConfigError",
    "load_config",
    "resolve_model",
    "resolve_noise",
    "resolve_dataset",
    "resolve_train_section",
    "resolve_grid",
    "require",
]


class ConfigError(Exception):
    """All validation failures of one config file, reported together."""

    def __init__(self, errors):
        self.errors = [str(e) for e in errors]
        super().__init__(
            "invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors)
        )


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return raw


def require(section: dict, field: str, errors: list[str], *, kind=None, where: str = ""):
    """Fetch a required field, recording a naming error when absent or mistyped."""
    prefix = f"{where}." if where else ""
    if field not in section:
        errors.append(f"missing required field {prefix}{field}")
        return None
    value = section[field]
    if kind is not None and not isinstance(value, kind):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        errors.append(f"field {prefix}{field} must be {names}, got {type(value).__name__}")
        return None
    return value


def _number(section: dict, field: str, default, errors: list[str], *, where: str,
            minimum=None, integer: bool = False):
    value = section.get(field, default)
    ok_types = (int,) if integer else (int, float)
    if not isinstance(value, ok_types) or isinstance(value, bool):
        errors.append(f"field {where}.{field} must be a number, got {value!r}")
        return default
    if minimum is not None and value < minimum:
        errors.append(f"field {where}.{field} must be >= {minimum}, got {value}")
        return default
    return value


def resolve_model(section, errors: list[str]) -> ModelConfig | None:
    """A preset name or an inline object with ModelConfig fields."""
    if section is None:
        errors.append("missing required field model (preset name or object)")
        return None
    if isinstance(section, str):
        if section not in PRESETS:
            errors.append(f"unknown model preset {section!r}, available: {sorted(PRESETS)}")
            return None
        return PRESETS[section]
    if not isinstance(section, dict):
        errors.append(f"field model must be a preset name or object, got {type(section).__name__}")
        return None
    kwargs = {}
    mapping = {
        "input_shape": tuple,
        "depth": int,
        "base_channels": int,
        "film_sites": tuple,
        "conditioner_hidden": tuple,
        "seed": int,
    }
    for key, value in section.items():
        if key not in mapping:
            errors.append(f"unknown model field {key!r}")
            continue
        kwargs[key] = mapping[key](value) if isinstance(value, list) else value
    try:
        cfg = ModelConfig(**kwargs)
        cfg.resolved_sites()
        return cfg
    except (ValueError, TypeError) as exc:
        errors.append(f"model: {exc}")
        return None


def resolve_noise(section, errors: list[str], where: str) -> NoiseDistribution | None:
    if not isinstance(section, dict):
        errors.append(f"field {where} must be an object with a_range/sigma_range")
        return None
    ranges = {}
    for name in ("a_range", "sigma_range"):
        value = section.get(name, [0.0, 0.0])
        if (not isinstance(value, list) or len(value) != 2
                or not all(isinstance(v, (int, float)) for v in value)):
            errors.append(f"field {where}.{name} must be [lo, hi], got {value!r}")
            return None
        ranges[name] = (float(value[0]), float(value[1]))
    unknown = set(section) - {"a_range", "sigma_range"}
    if unknown:
        errors.append(f"unknown fields in {where}: {sorted(unknown)}")
    try:
        return NoiseDistribution(**ranges)
    except ValueError as exc:
        errors.append(f"{where}: {exc}")
        return None


def resolve_dataset(section, errors: list[str], base_dir: Path) -> dict | None:
    """Validated dataset spec: {'kind', 'dir', and kind-specific fields}."""
    if not isinstance(section, dict):
        errors.append("missing or invalid dataset section (object with kind/dir)")
        return None
    kind = require(section, "kind", errors, kind=str, where="dataset")
    directory = require(section, "dir", errors, kind=str, where="dataset")
    if kind is not None and kind not in ("cifar10", "png"):
        errors.append(f"dataset.kind must be 'cifar10' or 'png', got {kind!r}")
        return None
    if kind is None or directory is None:
        return None
    path = (base_dir / directory).resolve() if not Path(directory).is_absolute() else Path(directory)
    if not path.is_dir():
        errors.append(f"dataset.dir does not exist: {path}")
        return None
    out = {"kind": kind, "dir": str(path)}
    if kind == "png":
        out["patch"] = _number(section, "patch", 128, errors, where="dataset", minimum=1, integer=True)
        out["stride"] = _number(section, "stride", out["patch"], errors, where="dataset",
                                minimum=1, integer=True)
    limit = section.get("limit")
    if limit is not None:
        if not isinstance(limit, int) or limit < 1:
            errors.append(f"dataset.limit must be a positive integer, got {limit!r}")
        else:
            out["limit"] = limit
    return out


def resolve_grid(section: dict, field: str, default: list[float], errors: list[str],
                 *, where: str) -> list[float]:
    value = section.get(field, default)
    if (not isinstance(value, list) or not value
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        errors.append(f"field {where}.{field} must be a non-empty list of numbers, got {value!r}")
        return default
    floats = [float(v) for v in value]
    if any(b <= a for a, b in zip(floats, floats[1:])):
        errors.append(f"field {where}.{field} must be sorted strictly ascending, got {floats}")
    if any(v < 0 for v in floats):
        errors.append(f"field {where}.{field} entries must be non-negative, got {floats}")
    return floats


def resolve_train_section(section, model: ModelConfig | None, seed: int,
                          errors: list[str], where: str = "train") -> dict | None:
    """Validated kwargs for TrainConfig (minus the model), plus the resolved echo."""
    if not isinstance(section, dict):
        errors.append(f"missing or invalid {where} section")
        return None
    noise = resolve_noise(section.get("noise", {}), errors, f"{where}.noise")
    resolved = {
        "noise": noise,
        "batch_size": _number(section, "batch_size", 64, errors, where=where, minimum=1, integer=True),
        "epochs": _number(section, "epochs", 1, errors, where=where, minimum=1, integer=True),
        "lr": _number(section, "lr", 0.001, errors, where=where),
        "beta1": _number(section, "beta1", 0.9, errors, where=where),
        "beta2": _number(section, "beta2", 0.999, errors, where=where),
        "eps": _number(section, "eps", 1e-7, errors, where=where),
        "seed": seed,
        "checkpoint_every": _number(section, "checkpoint_every", 0, errors, where=where,
                                    minimum=0, integer=True),
    }
    groups = section.get("trainable_groups", ["backbone", "film"])
    if (not isinstance(groups, list) or not groups
            or not set(groups).issubset({"backbone", "film"})):
        errors.append(
            f"field {where}.trainable_groups must be a non-empty subset of "
            f"['backbone', 'film'], got {groups!r}"
        )
    else:
        resolved["trainable_groups"] = frozenset(groups)
    known = {"noise", "batch_size", "epochs", "lr", "beta1", "beta2", "eps",
             "trainable_groups", "checkpoint_every"}
    unknown = set(section) - known
    if unknown:
        errors.append(f"unknown fields in {where}: {sorted(unknown)}")
    if resolved.get("lr", 0.001) <= 0:
        errors.append(f"field {where}.lr must be positive")
    return resolved if noise is not None else None
