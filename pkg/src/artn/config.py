"""Strict, typed, flat configuration.

Files use dotted keys, one per line (``train.lambda = 0.6``); TOML section
headers are accepted too since the file is read as TOML and flattened. A run
manifest (JSON) can be passed wherever a config file is expected.
"""

from __future__ import annotations

import difflib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "ARTN_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | bool | str | list[int] | list[float] | list[str]
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""
    choices: tuple = ()


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _all(pred):
    return lambda vs: all(pred(v) for v in vs)


SCHEMA = {
    # training
    "train.method": Key("str", "artn", choices=("artn", "dann", "source_only")),
    "train.epochs": Key("int", 20, lambda v: v >= 1, ">= 1"),
    "train.batch_size": Key("int", 128, lambda v: v >= 1, ">= 1"),
    "train.learning_rate": Key("float", 0.01, _pos, "> 0"),
    "train.momentum": Key("float", 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
    "train.lambda": Key("float", 1.0, _nonneg, ">= 0"),
    "train.beta": Key("float", 0.2, _nonneg, ">= 0"),
    "train.grl_schedule": Key("str", "dann", choices=("dann", "constant")),
    "train.seed": Key("int", 0, _nonneg, ">= 0"),
    "train.eval_every": Key("int", 0, _nonneg, ">= 0"),
    # networks
    "model.feature_widths": Key("list[int]", [32, 32], lambda v: len(v) >= 1 and all(w >= 1 for w in v),
                                "non-empty, entries >= 1"),
    "model.classifier_hidden": Key("int", 32, lambda v: v >= 1, ">= 1"),
    "model.domain_hidden": Key("int", 32, lambda v: v >= 1, ">= 1"),
    "model.batch_norm": Key("bool", True),
    "model.residual_stride": Key("int", 1, lambda v: v >= 1, ">= 1"),
    "model.transform_activation": Key("str", "relu", choices=("relu", "none")),
    # datasets
    "data.kind": Key("str", "blobs", choices=("blobs", "moons", "idx", "bow")),
    "data.seed": Key("int", 0, _nonneg, ">= 0"),
    "data.classes": Key("int", 3, lambda v: v >= 2, ">= 2"),
    "data.n_per_class": Key("int", 200, lambda v: v >= 1, ">= 1"),
    "data.dim": Key("int", 8, lambda v: v >= 2, ">= 2"),
    "data.center_spread": Key("float", 2.0, _pos, "> 0"),
    "data.cluster_std": Key("float", 0.5, _pos, "> 0"),
    "data.n_samples": Key("int", 600, lambda v: v >= 2 and v % 2 == 0, "even, >= 2"),
    "data.moons_noise": Key("float", 0.1, _nonneg, ">= 0"),
    "data.source_images": Key("str", ""),
    "data.source_labels": Key("str", ""),
    "data.target_images": Key("str", ""),
    "data.target_labels": Key("str", ""),
    "data.source_path": Key("str", ""),
    "data.target_path": Key("str", ""),
    "data.bow_dim": Key("int", 0, _nonneg, ">= 0"),
    # domain shift applied to synthetic targets
    "shift.rotation": Key("float", 0.0, math.isfinite, "finite"),
    "shift.translation": Key("list[float]", [], _all(math.isfinite), "finite entries"),
    "shift.scale": Key("float", 1.0, _pos, "> 0"),
    "shift.noise_std": Key("float", 0.0, _nonneg, ">= 0"),
    "shift.seed": Key("int", 0, _nonneg, ">= 0"),
    # sweeps
    "sweep.stds": Key("list[float]", [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0], _all(_nonneg), "entries >= 0"),
    "sweep.lambdas": Key("list[float]", [0.4, 0.5, 0.6, 0.7, 0.8, 0.9], _all(_nonneg), "entries >= 0"),
    "sweep.seeds": Key("list[int]", [1, 2, 3, 4, 5], lambda v: len(v) >= 1 and all(s >= 0 for s in v),
                       "non-empty, entries >= 0"),
    "sweep.methods": Key("list[str]", ["source_only", "dann", "artn"],
                         _all(lambda m: m in ("artn", "dann", "source_only")),
                         "entries in artn, dann, source_only"),
    # synthetic data export
    "gendata.format": Key("str", "idx", choices=("idx", "bow")),
}


def _coerce(key: str, raw: Any) -> Any:
    spec = SCHEMA[key]
    kind = spec.kind

    def scalar(k, v):
        if k == "int":
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{key}: expected an integer, got {v!r}")
            return v
        if k == "float":
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{key}: expected a number, got {v!r}")
            v = float(v)
            if not math.isfinite(v):
                raise ConfigError(f"{key}: value must be finite, got {v!r}")
            return v
        if k == "bool":
            if not isinstance(v, bool):
                raise ConfigError(f"{key}: expected true or false, got {v!r}")
            return v
        if not isinstance(v, str):
            raise ConfigError(f"{key}: expected a string, got {v!r}")
        return v

    if kind.startswith("list["):
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {raw!r}")
        value = [scalar(kind[5:-1], v) for v in raw]
    else:
        value = scalar(kind, raw)
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} is not one of {', '.join(spec.choices)}")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{key}: {value!r} out of range ({spec.rule})")
    return value


def unknown_key_message(key: str) -> str:
    msg = f"unknown config key {key!r}"
    leaf_matches = difflib.get_close_matches(key, list(SCHEMA), n=1, cutoff=0.6)
    if not leaf_matches:
        # compare on the last component too so `lamda` finds `train.lambda`
        leaves = {k.rsplit(".", 1)[-1]: k for k in SCHEMA}
        close = difflib.get_close_matches(key.rsplit(".", 1)[-1], list(leaves), n=1, cutoff=0.6)
        leaf_matches = [leaves[c] for c in close]
    if leaf_matches:
        msg += f"; did you mean {leaf_matches[0]!r}?"
    return msg


def _flatten(table: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in table.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def read_config_file(path) -> dict:
    """Raw flat mapping from a TOML-style config or a run manifest."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict) or not isinstance(doc.get("config"), dict):
            raise ConfigError(f"{p}: a JSON config must be a run manifest with a 'config' object")
        return dict(doc["config"])
    try:
        return _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def parse_override(item: str) -> tuple:
    """``key=value`` with a TOML literal value; bare words are strings."""
    key, sep, value = item.partition("=")
    key, value = key.strip(), value.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} must look like key=value")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key, parsed


def resolve(file_values: Optional[dict] = None, overrides=(), seed: Optional[int] = None,
            environ=None) -> dict:
    """Merge defaults, file, ``--set`` overrides and the seed flag.

    Seed precedence: ``--seed`` flag, then ``--set train.seed``, then the
    file, then the ``ARTN_SEED`` environment variable, then the default.
    """
    environ = os.environ if environ is None else environ
    merged = {}
    for source in (file_values or {}, dict(overrides)):
        for key, raw in source.items():
            if key not in SCHEMA:
                raise ConfigError(unknown_key_message(key))
            merged[key] = _coerce(key, raw)
    if seed is not None:
        merged["train.seed"] = _coerce("train.seed", seed)
    elif "train.seed" not in merged and environ.get(SEED_ENV, "").strip():
        raw = environ[SEED_ENV].strip()
        try:
            merged["train.seed"] = _coerce("train.seed", int(raw))
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from None
    return {k: merged.get(k, _copy_default(spec.default)) for k, spec in SCHEMA.items()}


def _copy_default(v):
    return list(v) if isinstance(v, list) else v


def load(path=None, overrides=(), seed: Optional[int] = None, environ=None) -> dict:
    file_values = read_config_file(path) if path is not None else {}
    return resolve(file_values, [parse_override(o) if isinstance(o, str) else o for o in overrides],
                   seed, environ)


def to_text(cfg: dict) -> str:
    """Serialise a resolved config in the flat dotted format."""
    lines = []
    for key, value in cfg.items():
        lines.append(f"{key} = {_literal(value)}")
    return "\n".join(lines) + "\n"


def _literal(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_literal(x) for x in v) + "]"
    return str(v)
