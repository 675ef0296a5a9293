"""Run configuration: nested dataclasses read from and written to YAML.

Parsing is strict. Unknown keys and out-of-range values raise ``ConfigError``
with the dotted path of the offending field.
"""
from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentPolicy
from .data import SyntheticSpec
from .instance_loss import EXCHANGE_MODES
from .model import BackboneSpec, HeadSpec

STREAM_MODES = ("tri", "dual_online_target", "dual_online_online")
DATA_SOURCES = ("synthetic", "folder", "cifar-binary")
PRECISIONS = ("fixed", "fast")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    cifar_variant: str = "cifar100-coarse"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ValueError(f"source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"path is required for source {self.source!r}")


@dataclass
class ModelConfig:
    arch: str = "tiny-cnn"
    resolution: int = 16
    feature_dim: int = 128
    channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    hidden: int = 512
    out: int = 256
    cluster_hidden: int = 512
    norm: str = "batch"
    n_clusters: int = 4

    def __post_init__(self) -> None:
        if self.n_clusters < 2:
            raise ValueError(f"n_clusters must be at least 2, got {self.n_clusters}")
        self.backbone_spec()
        self.head_spec()

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.arch, self.resolution, self.feature_dim, tuple(self.channels))

    def head_spec(self) -> HeadSpec:
        return HeadSpec(self.hidden, self.out, self.cluster_hidden, self.norm)


@dataclass
class LossConfig:
    temperature: float = 0.5
    exchange: str = "exchange"
    include_self_term: bool = False

    def __post_init__(self) -> None:
        if not (isinstance(self.temperature, (int, float)) and math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be a finite positive number, got {self.temperature}")
        if self.exchange not in EXCHANGE_MODES:
            raise ValueError(f"exchange must be one of {EXCHANGE_MODES}, got {self.exchange!r}")


@dataclass
class OptimConfig:
    lr: float = 3e-4
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 1000

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two numbers in [0, 1), got {self.betas}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")


@dataclass
class EmaConfig:
    alpha: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha (EMA momentum) must lie in [0, 1], got {self.alpha}")


@dataclass
class AblationSwitches:
    stream_mode: str = "tri"
    use_instance_loss: bool = True
    use_cluster_loss: bool = True
    use_predictor: bool = True
    use_stop_gradient: bool = True
    use_entropy: bool = True

    def __post_init__(self) -> None:
        if self.stream_mode not in STREAM_MODES:
            raise ValueError(f"stream_mode must be one of {STREAM_MODES}, got {self.stream_mode!r}")
        if not (self.use_instance_loss or self.use_cluster_loss):
            raise ValueError("at least one of use_instance_loss / use_cluster_loss must be enabled")

    @property
    def uses_target(self) -> bool:
        return self.stream_mode != "dual_online_online"

    @property
    def uses_ema(self) -> bool:
        return self.uses_target and self.use_stop_gradient


@dataclass
class EvalConfig:
    nmi_average: str = "arithmetic"

    def __post_init__(self) -> None:
        if self.nmi_average not in ("arithmetic", "geometric"):
            raise ValueError(f"nmi_average must be 'arithmetic' or 'geometric', got {self.nmi_average!r}")


@dataclass
class RunSection:
    seed: int = 0
    checkpoint_every: int = 10
    out_dir: str = "runs/default"
    precision: str = "fixed"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be at least 1, got {self.checkpoint_every}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self) -> None:
        if self.augment.output_size != self.model.resolution:
            raise ConfigError(
                f"augment.output_size ({self.augment.output_size}) must equal model.resolution ({self.model.resolution})"
            )
        if self.data.source == "synthetic" and self.data.synthetic.n_clusters != self.model.n_clusters:
            raise ConfigError(
                f"model.n_clusters ({self.model.n_clusters}) must match data.synthetic.n_clusters "
                f"({self.data.synthetic.n_clusters})"
            )

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def replace(self, **sections: Any) -> "RunConfig":
        """Copy with some sections replaced; values may be dataclasses or dicts of field overrides."""
        data = self.to_dict()
        for name, value in sections.items():
            if dataclasses.is_dataclass(value):
                value = _plain(asdict(value))
            data[name] = {**data[name], **value}
        return from_dict(data)


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(tp, value, where)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        inner = typing.get_args(tp)[0] if typing.get_args(tp) else Any
        items = [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: dict, where: str) -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path: str | Path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config))
