"""Run configuration: dataclasses, TOML loading and dotted overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid hyperparameter or shape configuration."""


@dataclass
class SynthConfig:
    seed: int = 0
    image_size: int = 256
    num_classes: int = 2
    min_objects: int = 1
    max_objects: int = 4
    fault_rate: float = 0.5
    clutter: float = 0.5
    train_count: int = 800
    test_count: int = 200
    # object side length as a fraction of the image side
    min_size: float = 0.25
    max_size: float = 0.45

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_classes != 2:
            raise ConfigError("the synthetic generator renders exactly 2 classes (normal, fault)")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if not 0.0 <= self.fault_rate <= 1.0:
            raise ConfigError("fault_rate must lie in [0, 1]")
        if not 0.0 < self.min_size <= self.max_size < 1.0:
            raise ConfigError("need 0 < min_size <= max_size < 1")
        if self.train_count < 0 or self.test_count < 0:
            raise ConfigError("image counts must be non-negative")


@dataclass
class DistillConfig:
    """Model and training hyperparameters.

    Defaults sit at the published operating point where one exists
    (tau=15, lambda=1, 4 adaptor segments, 64 pyramid channels, shift size 5,
    SGD with momentum 0.9 and weight decay 1e-4, batch size 4). The schedule
    and image size are scaled down so a run fits on a desktop CPU.
    """

    tau: float = 15.0
    lam: float = 1.0
    segments: int = 4
    fpn_channels: int = 64
    shift_size: int = 5
    dilation: int = 1
    dims: tuple[int, ...] = (64, 128, 256, 512)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    mlp_ratio: float = 4.0
    attn_heads: int = 4
    num_classes: int = 2
    image_size: int = 64
    use_teacher: bool = True
    # feed the teacher a detached copy of the student pyramid, so L_det^T
    # trains the teacher and head without steering the student backbone
    detach_teacher_input: bool = True
    tau_squared: bool = True
    softmax_domain: str = "flat"  # "flat" | "channel"
    weighted_aggregation: bool = False
    head_convs: int = 1
    warmup_iters: int = 100
    lr_start: float = 1e-5
    lr_peak: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    batch_size: int = 4
    total_iters: int = 2000
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        self.dims = tuple(self.dims)
        self.depths = tuple(self.depths)

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.fpn_channels <= 0:
            raise ConfigError(f"fpn_channels must be > 0, got {self.fpn_channels}")
        if self.segments <= 0 or self.fpn_channels % self.segments:
            raise ConfigError(
                f"segments={self.segments} must divide fpn_channels={self.fpn_channels}")
        if self.fpn_channels % self.attn_heads:
            raise ConfigError(
                f"attn_heads={self.attn_heads} must divide fpn_channels={self.fpn_channels}")
        if self.shift_size < 1 or self.shift_size % 2 == 0:
            raise ConfigError(f"shift_size must be a positive odd integer, got {self.shift_size}")
        if self.dilation < 1:
            raise ConfigError("dilation must be >= 1")
        if len(self.dims) != 4 or len(self.depths) != 4:
            raise ConfigError("backbone needs exactly 4 stages")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ConfigError(f"stage dims must increase strictly, got {self.dims}")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be a multiple of 32, got {self.image_size}")
        if self.softmax_domain not in ("flat", "channel"):
            raise ConfigError(f"unknown softmax_domain {self.softmax_domain!r}")
        if self.batch_size < 1 or self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("batch_size, total_iters and warmup_iters must be non-negative")

    def model_hash(self) -> str:
        """Hash of the fields that determine parameter shapes."""
        keys = ("segments", "fpn_channels", "shift_size", "dilation", "dims", "depths",
                "mlp_ratio", "attn_heads", "num_classes", "image_size", "use_teacher",
                "weighted_aggregation", "head_convs")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {"synth": SynthConfig, "distill": DistillConfig}
# CLI spellings that differ from field names
_ALIASES = {"lambda": "lam", "fpn-channels": "fpn_channels", "c_fpn": "fpn_channels"}


def _coerce(cls: type, name: str, value: Any) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields:
        raise ConfigError(f"unknown key {name!r} for section {cls.__name__}")
    default = getattr(cls(), name)
    if isinstance(value, str):
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0"):
                raise ConfigError(f"{name}: expected a boolean, got {value!r}")
            return low in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(","))
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple):
        return tuple(value)
    return value


def set_dotted(cfg: RunConfig, key: str, value: Any) -> None:
    """Apply an override such as ``distill.tau=5`` or ``data_dir=d``."""
    parts = key.split(".")
    if len(parts) == 1:
        if parts[0] not in ("data_dir", "out_dir"):
            raise ConfigError(f"unknown top-level key {key!r}")
        setattr(cfg, parts[0], str(value))
        return
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"bad override key {key!r}")
    section, name = parts
    name = _ALIASES.get(name, name)
    setattr(getattr(cfg, section), name, _coerce(_SECTIONS[section], name, value))


def from_dict(data: dict[str, Any]) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section [{key}] must be a table")
            for name, v in value.items():
                set_dotted(cfg, f"{key}.{name}", v)
        else:
            set_dotted(cfg, key, value)
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        with open(path, "rb") as fh:
            cfg = from_dict(tomllib.load(fh))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_dotted(cfg, key.strip(), value.strip())
    cfg.synth.validate()
    cfg.distill.validate()
    return cfg
