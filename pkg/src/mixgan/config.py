"""Experiment configuration: schema, presets, YAML I/O and dotted overrides."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment import MixStrategyConfig
from .errors import ConfigError, MixGANError
from .models import ModelSpec
from .regularize import RegularizerConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "synthetic://colored-shapes?n=2000&seed=0"
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        raw = copy.deepcopy(raw)
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        _reject_unknown(raw, {"schema_version", "dataset", "output_dir", "model", "train"}, "")
        train_raw = dict(raw.get("train", {}))
        mix = _build(MixStrategyConfig, train_raw.pop("mix", {}), "train.mix.")
        regs = _build(RegularizerConfig, train_raw.pop("regularizers", {}), "train.regularizers.")
        _check_types(TrainConfig, train_raw, "train.", skip={"mix", "regularizers"})
        try:
            train = TrainConfig(**train_raw, mix=mix, regularizers=regs)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc
        return cls(
            model=_build(ModelSpec, raw.get("model", {}), "model."),
            train=train,
            dataset=_typed(raw.get("dataset", cls.dataset), str, "dataset"),
            output_dir=_typed(raw.get("output_dir", cls.output_dir), str, "output_dir"),
            schema_version=version,
        )


def _reject_unknown(raw: dict, allowed, prefix: str):
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))


def _typed(value, kind, key):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected int, got bool")
    if not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__} ({value!r})")
    return value


def _check_types(cls, raw: dict, prefix: str, skip=()):
    defaults = cls()
    _reject_unknown(raw, {f.name for f in fields(cls)}, prefix)
    for key in list(raw):
        if key in skip:
            continue
        default = getattr(defaults, key)
        raw[key] = _typed(raw[key], type(default), prefix + key)


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.')}: expected a mapping")
    raw = dict(raw)
    _check_types(cls, raw, prefix)
    try:
        return cls(**raw)
    except MixGANError as exc:
        raise ConfigError(f"{prefix.rstrip('.')}: {exc}") from exc


# ---------------------------------------------------------------------------
# presets (model / loss / discriminator normalization / regularizers per case)


def _preset(family, d_norm, gp, ratio):
    return {
        "model": {"family": family, "resolution": 64, "z_dim": 128, "base_channels": 64, "d_norm": d_norm},
        "train": {
            "batch_size": 64, "n_crit": 2, "eta": 1e-3, "beta1": 0.01, "beta2": 0.999,
            "total_iterations": 100_000, "loss": "hinge",
            "mix": {"strategy": "none", "ratio": ratio, "alpha": 1.0},
            "regularizers": {"gp_enabled": gp, "gp_every": 5, "gp_coefficient": 10.0,
                             "cr_enabled": True, "cr_coefficient": 1.0, "cr_max_shift": 4},
        },
    }


PRESETS = {
    "case1": _preset("dcgan", ["layer"], True, 0.25),
    "case2": _preset("dcgan", ["spectral"], False, 0.25),
    "case3": _preset("resnet", ["layer", "spectral"], True, 0.15),
}


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a raw config mapping."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = parse_value(text)
    return out


def resolve_config(path=None, preset: str | None = None, overrides=()) -> ExperimentConfig:
    raw: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        raw = copy.deepcopy(PRESETS[preset])
    if path is not None:
        raw = deep_merge(raw, load_yaml(path))
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))


def load_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
