"""Run configuration: strict TOML reading, validation, and serialization.

A run is reproducible from its config plus seed alone, so the parser is
strict: unknown sections or keys are errors (no silent typo absorption), and
every value is type-checked. ``resolve()`` materializes all defaults so the
config written next to run artifacts is complete.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from .circuits import VARIANTS
from .neurons import KINDS

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "to_toml"]


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/run"
    precision: str = "f64"


@dataclass
class ModelSection:
    kind: str = "stc_lif"
    alpha: float = 0.5
    vth: float = 1.0
    surrogate_width: float = 2.0
    mu_d: float = 0.0
    mu_s: float = 0.0
    lambda_d: float = 0.5
    lambda_s: float = 0.5


@dataclass
class CircuitSection:
    variant: str = "group_conv"
    groups: int = 16
    kernel: int = 5
    enable_tc: bool = True
    enable_sc: bool = True
    detach: bool = True


@dataclass
class ArchSection:
    channels: list[int] = field(default_factory=lambda: [256, 256, 256])
    patch: int = 2
    kernel: int = 5
    norm_groups: int = 16
    in_channels: int = 1
    height: int = 64
    width: int = 64


@dataclass
class DataSection:
    source: str = "blobs"
    t_in: int = 10
    t_out: int = 10
    # blobs
    canvas: int = 16
    n_objects: int = 2
    object_size: int = 3
    speed_min: float = 0.5
    speed_max: float = 1.5
    intensity: float = 1.0
    n_train: int = 64
    n_test: int = 16
    seed: int = -1          # -1 means: reuse the run seed
    # npy
    train_path: str = ""
    test_path: str = ""


@dataclass
class OptimSection:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 100
    teacher_forcing: bool = False
    input_phase_loss: bool = False


@dataclass
class ScheduleSection:
    lr_init: float = 1e-3
    lr_final: float = 1e-5
    warmup_epochs: int = 10


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    circuit: CircuitSection = field(default_factory=CircuitSection)
    arch: ArchSection = field(default_factory=ArchSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    @property
    def dtype(self):
        return np.float32 if self.run.precision == "f32" else np.float64

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.data.seed < 0 else self.data.seed

    def validate(self) -> "RunConfig":
        if self.model.kind not in KINDS:
            raise ConfigError(f"model.kind must be one of {KINDS}, got {self.model.kind!r}")
        if self.circuit.variant not in VARIANTS:
            raise ConfigError(
                f"circuit.variant must be one of {VARIANTS}, got {self.circuit.variant!r}")
        if self.run.precision not in ("f32", "f64"):
            raise ConfigError(f"run.precision must be 'f32' or 'f64', got {self.run.precision!r}")
        if self.data.source not in ("blobs", "npy"):
            raise ConfigError(f"data.source must be 'blobs' or 'npy', got {self.data.source!r}")
        if self.data.source == "npy" and not (self.data.train_path and self.data.test_path):
            raise ConfigError("data.source='npy' requires train_path and test_path")
        if self.optim.kind not in ("adam", "sgd_momentum"):
            raise ConfigError(f"optim.kind must be 'adam' or 'sgd_momentum'")
        if self.data.t_in < 1 or self.data.t_out < 1:
            raise ConfigError("data.t_in and data.t_out must be >= 1")
        if not 0 <= self.schedule.warmup_epochs < self.optim.epochs:
            raise ConfigError("schedule.warmup_epochs must lie in [0, optim.epochs)")
        if self.arch.height % self.arch.patch or self.arch.width % self.arch.patch:
            raise ConfigError("arch.height and arch.width must be divisible by arch.patch")
        for c in self.arch.channels:
            if c % self.arch.norm_groups:
                raise ConfigError(
                    f"channel count {c} not divisible by norm_groups {self.arch.norm_groups}")
        return self


_SECTIONS = {
    "run": RunSection,
    "model": ModelSection,
    "circuit": CircuitSection,
    "arch": ArchSection,
    "data": DataSection,
    "optim": OptimSection,
    "schedule": ScheduleSection,
}


def _coerce(section: str, key: str, value, target_type):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{section}.{key}' must be a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{section}.{key}' must be an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"key '{section}.{key}' must be a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"key '{section}.{key}' must be a string, got {value!r}")
        return value
    # list[int] (arch.channels)
    if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool)
                                       for v in value):
        return list(value)
    raise ConfigError(f"key '{section}.{key}' must be a list of integers, got {value!r}")


def parse_config(raw: dict) -> RunConfig:
    """Build a validated RunConfig from a parsed TOML mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    unknown_sections = set(raw) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    cfg = RunConfig()
    for section_name, section_cls in _SECTIONS.items():
        block = raw.get(section_name, {})
        if not isinstance(block, dict):
            raise ConfigError(f"section [{section_name}] must be a table")
        fields = {f.name: f for f in dataclasses.fields(section_cls)}
        unknown = set(block) - set(fields)
        if unknown:
            raise ConfigError(
                f"unknown key(s) in [{section_name}]: {sorted(unknown)}")
        section_obj = getattr(cfg, section_name)
        for key, value in block.items():
            current = getattr(section_obj, key)
            target = list if isinstance(current, list) else type(current)
            setattr(section_obj, key, _coerce(section_name, key, value, target))
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return parse_config(raw)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def to_toml(cfg: RunConfig) -> str:
    """Serialize with every field materialized (the resolved-config snapshot)."""
    lines: list[str] = []
    for section_name in _SECTIONS:
        lines.append(f"[{section_name}]")
        section_obj = getattr(cfg, section_name)
        for f in dataclasses.fields(section_obj):
            lines.append(f"{f.name} = {_fmt_value(getattr(section_obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved.toml"
    path.write_text(to_toml(cfg))
    return path
