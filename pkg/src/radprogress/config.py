"""Model and training configuration with JSON file + key=value override support.

A config file holds up to three sections, each mirroring a dataclass::

    {"model": {"hidden_size": 64, ...},
     "stage1": {"epochs": 10, ...},
     "stage2": {"epochs": 5, ...}}

Missing sections and keys fall back to defaults (the reference defaults match
the tuned full-scale setup); unknown keys or ill-typed values raise
:class:`ConfigError`. Overrides use dotted paths, e.g.
``model.hidden_size=32`` or ``stage2.epochs=20``, and win over file values.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

NUM_WORKERS_ENV = "RECAP_NUM_WORKERS"

ABLATIONS = ("none", "no-op", "no-obs", "no-pro", "no-prr")
CHECKPOINT_METRICS = ("macro_f1_abnormal", "bleu4")


class ConfigError(ValueError):
    """Invalid configuration content (bad key, type, or value)."""


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 768
    num_heads: int = 8
    visual_layers: int = 2
    encoder_layers: int = 3
    decoder_layers: int = 3
    rgcn_layers: int = 3
    ffn_ratio: int = 4
    dropout: float = 0.1
    image_height: int = 48
    image_width: int = 32
    patch_size: int = 8
    gamma: float = 2.0
    top_k: int = 30
    min_count: int = 3
    max_steps: int = 64
    max_positions: int = 160
    obs_threshold: float = 0.5
    prog_threshold: float = 0.5

    def validate(self) -> None:
        if self.hidden_size < 1 or self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} must be a positive multiple of "
                f"num_heads {self.num_heads}"
            )
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by "
                f"patch_size {self.patch_size}"
            )
        for name in (
            "visual_layers",
            "encoder_layers",
            "decoder_layers",
            "rgcn_layers",
            "ffn_ratio",
            "top_k",
            "min_count",
            "max_steps",
            "max_positions",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("obs_threshold", "prog_threshold"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.max_positions < self.max_steps + 2:
            raise ConfigError(
                f"max_positions {self.max_positions} too small for max_steps "
                f"{self.max_steps}"
            )

    @property
    def patch_count(self) -> int:
        return (self.image_height // self.patch_size) * (
            self.image_width // self.patch_size
        )


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 10
    batch_size: int = 128
    lr_encoder: float = 1e-4
    lr_rest: float = 1e-4
    weight_decay: float = 0.01
    dropout: float = 0.1
    alpha_d: float = 3.0
    lambda_gate: float = 0.5
    seed: int = 0
    augment: bool = True
    checkpoint_metric: str = "macro_f1_abnormal"
    ablation: str = "none"
    mixed_precision: bool = False
    eval_batch_size: int = 32
    validate_every: int = 1
    stop_at_train_f1: float | None = None
    stop_at_train_nll: float | None = None

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("epochs", "batch_size", "eval_batch_size", "validate_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_encoder", "lr_rest"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.alpha_d <= 0:
            raise ConfigError(f"alpha_d must be > 0, got {self.alpha_d}")
        if self.lambda_gate < 0:
            raise ConfigError(f"lambda_gate must be >= 0, got {self.lambda_gate}")
        if self.checkpoint_metric not in CHECKPOINT_METRICS:
            raise ConfigError(
                f"checkpoint_metric must be one of {CHECKPOINT_METRICS}, got "
                f"{self.checkpoint_metric!r}"
            )
        if self.ablation not in ABLATIONS:
            raise ConfigError(
                f"ablation must be one of {ABLATIONS}, got {self.ablation!r}"
            )


def default_stage1_config() -> TrainConfig:
    return TrainConfig(stage=1)


def default_stage2_config() -> TrainConfig:
    return TrainConfig(
        stage=2,
        epochs=5,
        batch_size=32,
        lr_encoder=5e-5,
        lr_rest=1e-4,
        augment=False,
        checkpoint_metric="bleu4",
    )


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainConfig = field(default_factory=default_stage1_config)
    stage2: TrainConfig = field(default_factory=default_stage2_config)

    def validate(self) -> None:
        self.model.validate()
        self.stage1.validate()
        self.stage2.validate()
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ConfigError("stage1/stage2 sections carry the wrong stage value")


def toy_experiment_config(seed: int = 0) -> ExperimentConfig:
    """Small setup that trains in seconds; used by docs and tests."""
    return ExperimentConfig(
        model=ModelConfig(
            hidden_size=32,
            num_heads=4,
            visual_layers=1,
            encoder_layers=1,
            decoder_layers=1,
            rgcn_layers=2,
            min_count=1,
            max_steps=48,
            max_positions=96,
        ),
        stage1=TrainConfig(
            stage=1, epochs=30, batch_size=16, augment=False, seed=seed
        ),
        stage2=TrainConfig(
            stage=2,
            epochs=20,
            batch_size=16,
            lr_encoder=5e-5,
            lr_rest=1e-4,
            augment=False,
            checkpoint_metric="bleu4",
            seed=seed,
        ),
    )


def _resolve_type(tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(value, tp, key: str):
    base, optional = _resolve_type(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"key {key!r} cannot be null")
    if base is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"key {key!r} must be a boolean")
    if base is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"key {key!r} must be an integer")
    if base is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"key {key!r} must be a number")
    if base is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"key {key!r} must be a string")
    raise ConfigError(f"key {key!r} has unsupported type {tp}")


def _dataclass_from_obj(cls, obj: dict, section: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(
            f"unknown keys in section {section!r}: {sorted(unknown)}; legal keys: "
            f"{sorted(names)}"
        )
    kwargs = {
        key: _coerce(value, hints[key], f"{section}.{key}")
        for key, value in obj.items()
    }
    return cls(**kwargs)


def experiment_config_from_obj(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - {"model", "stage1", "stage2"}
    if unknown:
        raise ConfigError(
            f"unknown config sections {sorted(unknown)}; legal sections: "
            f"['model', 'stage1', 'stage2']"
        )
    base = ExperimentConfig()
    model = (
        _dataclass_from_obj(ModelConfig, obj["model"], "model")
        if "model" in obj
        else base.model
    )

    def merged(cls, default, section):
        if section not in obj:
            return default
        payload = dict(dataclasses.asdict(default))
        sub = obj[section]
        if not isinstance(sub, dict):
            raise ConfigError(f"section {section!r} must be an object")
        payload.update(sub)
        return _dataclass_from_obj(cls, payload, section)

    cfg = ExperimentConfig(
        model=model,
        stage1=merged(TrainConfig, base.stage1, "stage1"),
        stage2=merged(TrainConfig, base.stage2, "stage2"),
    )
    cfg.validate()
    return cfg


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        payload = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        obj = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
    return experiment_config_from_obj(obj)


def experiment_config_to_obj(cfg: ExperimentConfig) -> dict:
    return {
        "model": dataclasses.asdict(cfg.model),
        "stage1": dataclasses.asdict(cfg.stage1),
        "stage2": dataclasses.asdict(cfg.stage2),
    }


def _parse_override_value(raw: str, tp, key: str):
    base, optional = _resolve_type(tp)
    if optional and raw.lower() in ("none", "null"):
        return None
    try:
        if base is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
        if base is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse override {key}={raw!r} as {base.__name__}") from exc
    raise ConfigError(f"key {key!r} has unsupported type {tp}")


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings on top of a config."""
    sections = {
        "model": dict(dataclasses.asdict(cfg.model)),
        "stage1": dict(dataclasses.asdict(cfg.stage1)),
        "stage2": dict(dataclasses.asdict(cfg.stage2)),
    }
    classes = {"model": ModelConfig, "stage1": TrainConfig, "stage2": TrainConfig}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        if section not in sections:
            raise ConfigError(
                f"unknown config section {section!r}; legal sections: "
                f"['model', 'stage1', 'stage2']"
            )
        hints = typing.get_type_hints(classes[section])
        if name not in hints:
            raise ConfigError(f"unknown key {name!r} in section {section!r}")
        sections[section][name] = _parse_override_value(raw, hints[name], key)
    out = ExperimentConfig(
        model=_dataclass_from_obj(ModelConfig, sections["model"], "model"),
        stage1=_dataclass_from_obj(TrainConfig, sections["stage1"], "stage1"),
        stage2=_dataclass_from_obj(TrainConfig, sections["stage2"], "stage2"),
    )
    out.validate()
    return out


def resolve_num_workers(environ: dict | None = None) -> int:
    """Read the data-loading worker count from RECAP_NUM_WORKERS (default 0)."""
    env = os.environ if environ is None else environ
    raw = env.get(NUM_WORKERS_ENV)
    if raw is None or raw == "":
        return 0
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(
            f"{NUM_WORKERS_ENV} must be a non-negative integer, got {raw!r}"
        ) from exc
    if value < 0:
        raise ConfigError(f"{NUM_WORKERS_ENV} must be >= 0, got {value}")
    return value


__all__ = [
    "ABLATIONS",
    "CHECKPOINT_METRICS",
    "NUM_WORKERS_ENV",
    "ConfigError",
    "ExperimentConfig",
    "ModelConfig",
    "TrainConfig",
    "apply_overrides",
    "default_stage1_config",
    "default_stage2_config",
    "experiment_config_from_obj",
    "experiment_config_to_obj",
    "load_experiment_config",
    "resolve_num_workers",
    "toy_experiment_config",
]
