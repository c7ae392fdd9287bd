"""Configuration schema, presets and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .heads import DkdLoss
from .tdm import SCAN_STRATEGIES

HEAD_KINDS = ("gap", "cov_pool")
STREAM_KINDS = ("joint", "bone", "joint_motion", "bone_motion")


@dataclass
class ModelConfig:
    layers: int = 7
    channels: int = 216
    heads: int = 9
    mti_scales: tuple = (1, 3, 5)
    pool_layers: tuple = (4, 6)
    head_kind: str = "gap"
    scan: str = "T"
    n_classes: int = 120
    stream: str = "joint"
    topology: str = "ntu25"
    expand: float = 1.0
    n_state: int = 16
    conv_width: int = 4
    dt_rank: int = 0
    max_hop: int = 8
    rpe: str = "hop"
    ffn_ratio: int = 0
    ns_iterations: int = 5
    discretization: str = "zoh"
    offset_rule: str = "literal"
    cyclic: bool = True
    bn_momentum: float = 0.1
    seed: int = 0

    def violations(self) -> list[str]:
        v = []
        if self.layers < 1:
            v.append(f"layers must be >= 1 (got {self.layers})")
        if self.channels < 2 or self.channels % 2:
            v.append(f"channels must be even and >= 2 (got {self.channels})")
        if self.heads < 1 or self.channels % self.heads:
            v.append(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        bad_pool = [p for p in self.pool_layers if not 1 <= p <= self.layers]
        if bad_pool:
            v.append(f"pool_layers {bad_pool} outside 1..{self.layers}")
        if len(set(self.pool_layers)) != len(tuple(self.pool_layers)):
            v.append("pool_layers contains duplicates")
        if self.head_kind not in HEAD_KINDS:
            v.append(f"head_kind must be one of {HEAD_KINDS} (got {self.head_kind!r})")
        if self.scan not in SCAN_STRATEGIES:
            v.append(f"scan must be one of {SCAN_STRATEGIES} (got {self.scan!r})")
        if self.stream not in STREAM_KINDS:
            v.append(f"stream must be one of {STREAM_KINDS} (got {self.stream!r})")
        if self.n_classes < 2:
            v.append(f"n_classes must be >= 2 (got {self.n_classes})")
        if not self.mti_scales or any(k < 1 for k in self.mti_scales):
            v.append(f"mti_scales must be positive kernel sizes (got {self.mti_scales})")
        if self.n_state < 1 or self.conv_width < 1 or self.expand <= 0:
            v.append("n_state, conv_width and expand must be positive")
        if self.ns_iterations < 1:
            v.append("ns_iterations must be >= 1")
        return v

    def validate(self) -> "ModelConfig":
        v = self.violations()
        if v:
            raise ConfigError("invalid model config: " + "; ".join(v))
        return self

    @property
    def time_divisor(self) -> int:
        return 2 ** len(tuple(self.pool_layers))


@dataclass
class TrainConfig:
    lr: float = 0.025
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 4e-4
    lr_drop_epochs: tuple = (110,)
    lr_drop_factor: float = 0.1
    warmup_epochs: int = 0
    batch_size: int = 64
    epochs: int = 120
    seed: int = 0
    augment: bool = True
    grad_clip: float = 0.0

    def violations(self) -> list[str]:
        v = []
        if not self.lr >= 0:
            v.append(f"lr must be >= 0 (got {self.lr})")
        if self.weight_decay < 0:
            v.append(f"weight_decay must be >= 0 (got {self.weight_decay})")
        if self.batch_size < 1 or self.epochs < 0:
            v.append("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.momentum < 1:
            v.append(f"momentum must lie in [0, 1) (got {self.momentum})")
        return v

    def validate(self) -> "TrainConfig":
        v = self.violations()
        if v:
            raise ConfigError("invalid train config: " + "; ".join(v))
        return self


@dataclass
class DataConfig:
    source: str = "synthetic"
    manifest: str = ""
    cache_dir: str = ""
    n_classes: int = 6
    n_train: int = 300
    n_test: int = 120
    T_raw: int = 48
    frames: int = 64
    noise: float = 0.02
    seed: int = 0
    center_joint: int = -1
    test_fraction: float = 0.3

    def resolved_center_joint(self, topology: str) -> int:
        if self.center_joint >= 0:
            return self.center_joint
        return 1 if (self.source != "synthetic" and topology == "ntu25") else 0


@dataclass
class KdConfig:
    alpha: float = 1.0
    beta: float = 8.0
    temperature: float = 4.0
    orientation: str = "student_first"
    tau_squared: bool = True

    def loss(self) -> DkdLoss:
        return DkdLoss(self.alpha, self.beta, self.temperature, self.orientation, self.tau_squared)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    kd: KdConfig = field(default_factory=KdConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> "RunConfig":
        v = [f"model: {m}" for m in self.model.violations()] + [f"train: {m}" for m in self.train.violations()]
        if self.data.frames % self.model.time_divisor:
            v.append(f"data: frames ({self.data.frames}) must be divisible by {self.model.time_divisor} "
                     f"for pool_layers {tuple(self.model.pool_layers)}")
        if v:
            raise ConfigError("invalid config: " + "; ".join(v))
        return self


def preset(name: str) -> RunConfig:
    """``full``: the reference architecture; ``desk``: a CPU-sized variant on synthetic data."""
    if name == "full":
        return RunConfig()
    if name == "desk":
        return RunConfig(
            model=ModelConfig(layers=2, channels=32, heads=4, pool_layers=(2,), n_classes=6),
            train=TrainConfig(lr=0.025, batch_size=16, epochs=30, lr_drop_epochs=(20, 26), warmup_epochs=2,
                              grad_clip=5.0, augment=False),
            data=DataConfig(frames=16),
        )
    raise ConfigError(f"unknown preset {name!r}; expected 'full' or 'desk'")


def flat_schema(cfg: RunConfig | None = None) -> dict[str, Any]:
    """Every dotted key with its current value."""
    cfg = cfg or RunConfig()
    out = {}
    for section in dataclasses.fields(cfg):
        sub = getattr(cfg, section.name)
        for f in dataclasses.fields(sub):
            out[f"{section.name}.{f.name}"] = getattr(sub, f.name)
    return out


def _coerce(raw: str, current: Any, key: str):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            raw = raw.strip().strip("()[]{}")
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} for {key} (expected {type(current).__name__})") from None


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; unknown keys raise ConfigError."""
    known = flat_schema(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        setattr(getattr(cfg, section), name, _coerce(raw, known[key], key))
    return cfg


def from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    known = flat_schema(cfg)
    for section, values in d.items():
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for name, value in values.items():
            key = f"{section}.{name}"
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(known[key], tuple):
                value = tuple(value)
            setattr(getattr(cfg, section), name, value)
    return cfg


def load_config(path=None, preset_name: str | None = None, overrides=()) -> RunConfig:
    cfg = preset(preset_name) if preset_name else RunConfig()
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        cfg = from_dict(d, cfg)
    return apply_overrides(cfg, overrides)
