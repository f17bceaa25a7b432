"""Run configuration with flat dotted keys.

A config file is a YAML mapping whose keys are dotted names, one per line::

    # comments are allowed
    encoder.embed_dim: 64
    mel.n_time_bins: 64
    mask.lo: 0.4

Every key must be one of ``RunConfig.keys()``. Resolution order is defaults,
then the file, then ``--set key=value`` overrides (values parsed as YAML
scalars). Derived widths (encoder input, predictor input/output) and the
optimizer's ``total_steps`` are filled in from other keys and cannot be set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import MelConfig
from .jepa import OptimizerConfig
from .probes import ProbeConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSection:
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0


@dataclass(frozen=True)
class PredictorSection:
    embed_dim: int = 384
    depth: int = 6
    num_heads: int = 12
    mlp_ratio: float = 4.0


@dataclass(frozen=True)
class OptimSection:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    peak_lr: float = 3e-4
    init_lr: float = 1e-6
    warmup_steps: int = 1000
    tau_base: float = 0.996


@dataclass(frozen=True)
class MaskSection:
    lo: float = 0.4
    hi: float = 0.6


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 256
    total_steps: int = 100_000
    checkpoint_every: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class PathSection:
    manifest: str = ""
    checkpoint_dir: str = "runs"
    log_dir: str = ""


@dataclass(frozen=True)
class RunConfig:
    patch_side: int = 16
    mel: MelConfig = field(default_factory=MelConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    optim: OptimSection = field(default_factory=OptimSection)
    mask: MaskSection = field(default_factory=MaskSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    paths: PathSection = field(default_factory=PathSection)

    @classmethod
    def keys(cls) -> list[str]:
        return list(flatten(cls()))

    def validate(self) -> RunConfig:
        """Build every component config once so their invariants run; re-raise as ConfigError."""
        try:
            self.encoder_config()
            self.predictor_config()
            self.optimizer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        checks = [
            (self.patch_side >= 1, "patch_side must be >= 1"),
            (
                self.mel.n_mels % self.patch_side == 0,
                f"mel.n_mels ({self.mel.n_mels}) must be divisible by patch_side ({self.patch_side})",
            ),
            (
                self.mel.n_time_bins % self.patch_side == 0,
                f"mel.n_time_bins ({self.mel.n_time_bins}) must be divisible by patch_side ({self.patch_side})",
            ),
            (
                0 < self.mask.lo <= self.mask.hi < 1,
                f"mask bounds must satisfy 0 < mask.lo <= mask.hi < 1, got [{self.mask.lo}, {self.mask.hi}]",
            ),
            (self.train.batch_size >= 1, "train.batch_size must be >= 1"),
            (self.train.checkpoint_every >= 1, "train.checkpoint_every must be >= 1"),
            (self.encoder.embed_dim % 4 == 0, "encoder.embed_dim must be divisible by 4"),
            (self.predictor.embed_dim % 4 == 0, "predictor.embed_dim must be divisible by 4"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    @property
    def grid(self) -> tuple[int, int]:
        return self.mel.n_mels // self.patch_side, self.mel.n_time_bins // self.patch_side

    def encoder_config(self) -> ViTConfig:
        return ViTConfig(input_dim=self.patch_side**2, **dataclasses.asdict(self.encoder))

    def predictor_config(self) -> ViTConfig:
        width = self.encoder.embed_dim
        return ViTConfig(input_dim=width, output_dim=width, **dataclasses.asdict(self.predictor))

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(total_steps=self.train.total_steps, **dataclasses.asdict(self.optim))

    @property
    def batch_seconds(self) -> float:
        return self.train.batch_size * self.mel.duration


def flatten(config: RunConfig) -> dict:
    flat = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            flat[f.name] = value
    return flat


def _coerce(key: str, value, default):
    """Cast ``value`` to the type of ``default`` (YAML reads ``3e-4`` as a string)."""
    if value is None or default is None and isinstance(value, (int, float)):
        return value
    target = float if default is None else type(default)
    try:
        if target is bool:
            if not isinstance(value, bool):
                raise ValueError
            return value
        if target is int:
            as_float = float(value)
            if not as_float.is_integer():
                raise ValueError
            return int(as_float)
        return target(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {target.__name__}") from None


def from_flat(values: dict) -> RunConfig:
    defaults = flatten(RunConfig())
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, v, defaults[k]) for k, v in values.items()}
    sections: dict[str, dict] = {}
    top = {}
    for key, value in values.items():
        if "." in key:
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = value
        else:
            top[key] = value
    base = RunConfig()
    kwargs = dict(top)
    try:
        for section, updates in sections.items():
            kwargs[section] = dataclasses.replace(getattr(base, section), **updates)
        config = dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config.validate()


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def parse_config(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> RunConfig:
    values: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping of dotted keys")
        values.update(loaded or {})
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    return from_flat(values)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(flatten(config), sort_keys=True)
