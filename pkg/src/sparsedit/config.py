"""YAML run configuration shared by all CLI subcommands."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
import yaml

from . import network
from .diffusion import NoiseSchedule, SyntheticDataset, TrainConfig
from .flops import _convention
from .grid import TokenGrid
from .network import ModelConfig
from .schedule import PruneSchedule

PRESETS = {
    "dit_xl": network.dit_xl,
    "sparse_dit_xl": network.sparse_dit_xl,
    "dit_b": network.dit_b,
    "sparse_dit_b": network.sparse_dit_b,
    "toy": network.toy_config,
}
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


@dataclass
class NoiseConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class ScheduleConfig:
    r_min: float = 0.44
    r_max: float = 0.86
    ladder: list | None = None  # default: square grids spanning [r_min, r_max]


@dataclass
class DataConfig:
    seed: int = 0
    radius: float = 1.6


@dataclass
class SampleConfig:
    n: int = 8
    sampler: str = "ddpm"
    steps: int = 25
    eta: float = 0.0
    cfg_scale: float = 1.0
    seed: int = 0
    labels: list | None = None


@dataclass
class FlopsConfig:
    convention: str = "2·MAC"
    cfg_doubling: bool = False


@dataclass
class ProfileConfig:
    timesteps: list = field(default_factory=lambda: [0, 25, 50, 75, 99])
    n: int = 8
    seed: int = 0


@dataclass
class AblateConfig:
    k: int = 2
    t: int = 50
    n: int = 8
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: ScheduleConfig | None = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    flops: FlopsConfig = field(default_factory=FlopsConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    dtype: str = "float32"
    seed: int = 0  # model initialisation
    checkpoint: str | None = None

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def noise_schedule(self) -> NoiseSchedule:
        n = self.noise
        return NoiseSchedule.linear(n.T, n.beta_start, n.beta_end)

    def prune_schedule(self) -> PruneSchedule:
        dense = self.model.grid
        T = self.noise.T
        if self.schedule is None:
            if self.model.sdtm:
                raise ConfigError("schedule", "required for models with sparse-dense token modules")
            return PruneSchedule.constant(dense, T, dense)
        s = self.schedule
        try:
            if s.ladder is None:
                return PruneSchedule.square(s.r_min, s.r_max, T, dense)
            return PruneSchedule(s.r_min, s.r_max, T, dense, tuple(TokenGrid.parse(g) for g in s.ladder))
        except ValueError as exc:
            raise ConfigError("schedule", str(exc)) from exc

    def dataset(self) -> SyntheticDataset:
        h, w = self.model.input_size
        if h != w:
            raise ConfigError("model.input_size", "the synthetic dataset needs square images")
        return SyntheticDataset(size=h, channels=self.model.in_channels, num_classes=self.model.num_classes,
                                radius=self.data.radius, seed=self.data.seed)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        for key, value in d.items():
            if dataclasses.is_dataclass(value):
                d[key] = dataclasses.asdict(value)
        return d

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _coerce(value: Any, annotation: str, name: str) -> Any:
    # YAML 1.1 reads exponent floats without a dot (1e-4) as strings
    kind = {"float": float, "int": int}.get(str(annotation))
    if kind is None or isinstance(value, bool) or value is None:
        return value
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {annotation}, got {value!r}") from None


def _section(cls, raw: Any, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown field")
        values[key] = _coerce(value, fields[key].type, f"{name}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def _model(raw: Any) -> ModelConfig:
    if not isinstance(raw, dict):
        raise ConfigError("model", "expected a mapping")
    raw = dict(raw)
    preset = raw.pop("preset", None)
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"model.{key}", "unknown field")
    if preset is not None and preset not in PRESETS:
        raise ConfigError("model.preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    try:
        return PRESETS[preset](**raw) if preset else ModelConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from exc


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown section")
    if "model" not in raw:
        raise ConfigError("model", "missing section")
    cfg = RunConfig(
        model=_model(raw["model"]),
        schedule=_section(ScheduleConfig, raw["schedule"], "schedule") if raw.get("schedule") is not None else None,
        noise=_section(NoiseConfig, raw.get("noise"), "noise"),
        data=_section(DataConfig, raw.get("data"), "data"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        sample=_section(SampleConfig, raw.get("sample"), "sample"),
        flops=_section(FlopsConfig, raw.get("flops"), "flops"),
        profile=_section(ProfileConfig, raw.get("profile"), "profile"),
        ablate=_section(AblateConfig, raw.get("ablate"), "ablate"),
        dtype=raw.get("dtype", "float32"),
        seed=raw.get("seed", 0),
        checkpoint=raw.get("checkpoint"),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.dtype not in DTYPES:
        raise ConfigError("dtype", f"must be one of {sorted(DTYPES)}")
    if cfg.noise.T < 1:
        raise ConfigError("noise.T", "must be positive")
    if not 0 < cfg.noise.beta_start <= cfg.noise.beta_end < 1:
        raise ConfigError("noise", "need 0 < beta_start <= beta_end < 1")
    if cfg.train.steps < 0 or cfg.train.batch_size < 1:
        raise ConfigError("train", "steps must be >= 0 and batch_size >= 1")
    if not 0 <= cfg.train.class_dropout < 1:
        raise ConfigError("train.class_dropout", "must lie in [0, 1)")
    if cfg.sample.sampler not in ("ddpm", "ddim"):
        raise ConfigError("sample.sampler", "must be 'ddpm' or 'ddim'")
    if cfg.sample.sampler == "ddim" and not 1 <= cfg.sample.steps <= cfg.noise.T:
        raise ConfigError("sample.steps", f"must lie in [1, {cfg.noise.T}]")
    if not 0 <= cfg.sample.eta <= 1:
        raise ConfigError("sample.eta", "must lie in [0, 1]")
    if cfg.sample.n < 1:
        raise ConfigError("sample.n", "must be positive")
    if any(not 0 <= t < cfg.noise.T for t in cfg.profile.timesteps):
        raise ConfigError("profile.timesteps", f"every timestep must lie in [0, {cfg.noise.T})")
    if not 0 <= cfg.ablate.t < cfg.noise.T:
        raise ConfigError("ablate.t", f"must lie in [0, {cfg.noise.T})")
    if not 0 <= cfg.ablate.k <= cfg.model.depth:
        raise ConfigError("ablate.k", f"must lie in [0, {cfg.model.depth}]")
    try:
        _convention(cfg.flops.convention)
    except ValueError as exc:
        raise ConfigError("flops.convention", str(exc)) from exc
    cfg.prune_schedule()


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {' '.join(str(exc).split())}") from exc
    return parse_config(raw)
