"""Run configuration: nested records, strict JSON loading, dotted-path overrides, shipped presets."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .data import SceneSpec
from .detector import DetectorConfig
from .errors import ConfigError, DataError
from .mae import MAEConfig
from .optim import ScheduleSpec
from .vit import ViTConfig

PRESETS = ("paper-base", "desk")


@dataclass(frozen=True)
class PretrainConfig:
    # peak lr = base_lr * lr_batch / 256
    base_lr: float = 1.5e-4
    lr_batch: int = 512
    # additionally multiply by batch_size / auto_scale_base when set
    auto_scale_lr: bool = False
    auto_scale_base: int = 512
    batch_size: int = 512
    epochs: int = 400
    warmup_epochs: int = 40
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    flip_prob: float = 0.5
    grad_clip: Optional[float] = None

    @property
    def peak_lr(self) -> float:
        lr = self.base_lr * self.lr_batch / 256
        if self.auto_scale_lr:
            lr *= self.batch_size / self.auto_scale_base
        return lr

    def schedule(self, steps_per_epoch: int) -> ScheduleSpec:
        return ScheduleSpec("warmup-cosine", self.warmup_epochs * steps_per_epoch,
                            self.epochs * steps_per_epoch)


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 12
    warmup_steps: int = 500
    milestones: tuple = (8, 11)  # epochs
    gamma: float = 0.1
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.05
    flip_prob: float = 0.5
    grad_clip: Optional[float] = None

    def schedule(self, steps_per_epoch: int) -> ScheduleSpec:
        return ScheduleSpec("warmup-multistep", self.warmup_steps, self.epochs * steps_per_epoch,
                            tuple(m * steps_per_epoch for m in self.milestones), self.gamma)


@dataclass(frozen=True)
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train_images: int = 100
    val_images: int = 50
    # val scenes are generated from indices offset by this amount
    val_offset: int = 1_000_000


@dataclass(frozen=True)
class EvalSection:
    max_dets: int = 100
    recall_samples: int = 101


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: MAEConfig = field(default_factory=lambda: MAEConfig(ViTConfig(), ViTConfig(depth=3, dim=512, heads=8)))
    detector: dict = field(default_factory=dict)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(backbone=self.model.encoder, num_classes=self.data.scene.num_classes,
                              max_dets=self.eval.max_dets, **self.detector)

    def to_dict(self) -> dict:
        return _to_plain(self)


# fields that are derived from other sections and may not be set in the detector section
_DETECTOR_DERIVED = ("backbone", "num_classes", "max_dets")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _coerce(value, default, path: str):
    """Match JSON values to the type of the default they replace."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path: str, base=None):
    """Strictly build dataclass ``cls`` from ``data``, starting from ``base`` (or defaults)."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    base = base if base is not None else cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {_join(path, unknown[0])!r}")
    values = {}
    for f in dataclasses.fields(cls):
        current = getattr(base, f.name)
        if f.name not in data:
            values[f.name] = current
            continue
        sub, p = data[f.name], _join(path, f.name)
        if dataclasses.is_dataclass(hints[f.name]):
            values[f.name] = _build(hints[f.name], sub, p, current)
        elif current is None:
            if sub is not None and (isinstance(sub, bool) or not isinstance(sub, (int, float))):
                raise ConfigError(f"{p}: expected a number or null, got {sub!r}")
            values[f.name] = None if sub is None else float(sub)
        elif sub is None and hints[f.name] is not float and "Optional" in str(hints[f.name]):
            values[f.name] = None
        else:
            values[f.name] = _coerce(sub, current, p)
    try:
        return cls(**values)
    except (TypeError, ValueError, DataError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _build_detector(data, base: dict) -> dict:
    if not isinstance(data, dict):
        raise ConfigError("detector: expected an object")
    defaults = DetectorConfig()
    allowed = {f.name for f in dataclasses.fields(DetectorConfig)} - set(_DETECTOR_DERIVED)
    out = dict(base)
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key 'detector.{key}'")
        out[key] = _coerce(value, getattr(defaults, key), f"detector.{key}")
    return out


def from_dict(data: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Overlay ``data`` on ``base`` (default: the built-in defaults) and validate."""
    base = base or RunConfig()
    data = dict(data)
    detector = _build_detector(data.pop("detector", {}), base.detector)
    cfg = _build(RunConfig, data, "", base)
    cfg = dataclasses.replace(cfg, detector=detector)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.detector_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"detector: {exc}") from exc
    if cfg.data.scene.image_size % cfg.model.patch:
        raise ConfigError(f"data.scene.image_size {cfg.data.scene.image_size} is not a multiple of "
                          f"model.encoder.patch {cfg.model.patch}")
    for name in ("pretrain", "finetune"):
        section = getattr(cfg, name)
        if section.batch_size < 1 or section.epochs < 1:
            raise ConfigError(f"{name}: batch_size and epochs must be positive")
        if not 0.0 <= section.flip_prob <= 1.0:
            raise ConfigError(f"{name}.flip_prob must lie in [0, 1]")
    if cfg.pretrain.warmup_epochs >= cfg.pretrain.epochs:
        raise ConfigError("pretrain.warmup_epochs must be smaller than pretrain.epochs")


def load_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("sarmae").joinpath(f"presets/{name}.json").read_text(encoding="utf-8")
    return from_dict(json.loads(text))


def load_file(path, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data, base)


def leaf_paths(cfg: RunConfig) -> list:
    """Every overridable dotted path, in definition order."""
    out = []

    def walk(obj, prefix):
        for key, value in obj.items():
            p = _join(prefix, key)
            if isinstance(value, dict) and p != "detector":
                walk(value, p)
            else:
                out.append(p)

    plain = cfg.to_dict()
    plain["detector"] = {k: v for k, v in _to_plain(dataclasses.asdict(cfg.detector_config())).items()
                         if k not in _DETECTOR_DERIVED}
    walk(plain, "")
    return [p for p in out if p != "detector"] + [f"detector.{k}" for k in plain["detector"]]


def parse_value(text: str):
    """Flag values are JSON; bare words fall back to strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{dotted.path: value}`` pairs; each path must name an existing field."""
    if not overrides:
        return cfg
    valid = set(leaf_paths(cfg))
    nested: dict = {}
    for path, value in overrides.items():
        if path not in valid:
            raise ConfigError(f"unknown config key {path!r}")
        node = nested
        *parents, leaf = path.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return from_dict(nested, cfg)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"
