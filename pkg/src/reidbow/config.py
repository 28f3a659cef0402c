"""``key = value`` pipeline config files with sections, plus provenance hashing."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .pipeline import PipelineConfig

# (section, key) -> PipelineConfig field
FIELDS = {
    ("dataset", "root"): "dataset_root",
    ("dataset", "layout"): "layout",
    ("dataset", "target_size"): "target_size",
    ("dataset", "color_names"): "color_names",
    ("superpixels", "n_superpixels"): "n_superpixels",
    ("superpixels", "compactness"): "compactness",
    ("superpixels", "fg_threshold"): "fg_threshold",
    ("features", "n_strips"): "n_strips",
    ("features", "channels"): "channels",
    ("codebook", "k"): "codebook_k",
    ("codebook", "ma"): "ma",
    ("codebook", "metric"): "codebook_metric",
    ("codebook", "max_iters"): "kmeans_max_iters",
    ("codebook", "tol"): "kmeans_tol",
    ("codebook", "samples"): "codebook_samples",
    ("kissme", "regularization"): "kissme_regularization",
    ("kissme", "negative_ratio"): "negative_ratio",
    ("learner", "kind"): "learner",
    ("learner", "pca_dim"): "pca_dim",
    ("learner", "target_dim"): "target_dim",
    ("learner", "negative_ratio"): "learner_negative_ratio",
    ("protocol", "kind"): "protocol",
    ("protocol", "n_trials"): "n_trials",
    ("protocol", "train_file"): "train_file",
    ("protocol", "test_file"): "test_file",
    ("protocol", "multi_query"): "multi_query",
    ("protocol", "max_rank"): "max_rank",
    ("protocol", "seed"): "seed",
    ("output", "dir"): "output_dir",
}
_BY_FIELD = {v: k for k, v in FIELDS.items()}

# Fields that determine extracted local features (the feature cache key).
FEATURE_FIELDS = ("dataset_root", "layout", "target_size", "color_names", "n_superpixels",
                  "compactness", "fg_threshold", "n_strips", "channels")


def _convert(field_name: str, raw: str):
    default = {f.name: f for f in dataclasses.fields(PipelineConfig)}[field_name].default
    raw = raw.strip()
    try:
        if field_name == "target_size":
            parts = raw.lower().replace("x", ",").split(",")
            return tuple(int(p) for p in parts if p.strip())
        if field_name == "channels":
            return tuple(p.strip().upper() for p in raw.split(",") if p.strip())
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return raw or None
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {field_name}") from exc


def parse_assignments(pairs: dict) -> dict:
    """Map ``{"section.key": "value"}`` (or ``(section, key)`` keys) to config fields."""
    out = {}
    for key, raw in pairs.items():
        sk = tuple(key.split(".", 1)) if isinstance(key, str) else tuple(key)
        if len(sk) != 2 or sk not in FIELDS:
            raise ConfigError(f"unknown config key {'.'.join(sk)!r}")
        name = FIELDS[sk]
        out[name] = _convert(name, raw)
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, strict=True,
                                           inline_comment_prefixes=(";",))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if parser.defaults():
            raise ConfigError(f"{path}: keys outside a section are not allowed")
        for section in parser.sections():
            for key, raw in parser.items(section):
                values[(section, key)] = raw
        values = parse_assignments(values)
        base = Path(path).parent
        for name in ("dataset_root", "color_names", "train_file", "test_file"):
            v = values.get(name)
            if v and v != "synthetic" and not Path(v).is_absolute():
                values[name] = str((base / v).resolve())
    values.update(parse_assignments(overrides or {}))
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(config: PipelineConfig) -> str:
    sections: dict[str, list[str]] = {}
    for f in dataclasses.fields(config):
        section, key = _BY_FIELD[f.name]
        v = getattr(config, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ("x" if f.name == "target_size" else ", ").join(map(str, v))
        sections.setdefault(section, []).append(f"{key} = {v}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def config_hash(config: PipelineConfig) -> str:
    d = dataclasses.asdict(config)
    d.pop("output_dir")
    return _digest(d)


def feature_hash(config: PipelineConfig, input_manifest: list) -> str:
    d = {k: getattr(config, k) for k in FEATURE_FIELDS}
    return _digest({"config": d, "inputs": input_manifest})
