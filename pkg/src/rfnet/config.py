"""Run configuration: nested dataclasses read from ``section.key = value`` text."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .descriptor import DescriptorConfig
from .detector import DetectorConfig
from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.1
    iterations: int = 1000
    seed: int = 0
    desc_steps_per_iter: int = 2
    det_steps_per_iter: int = 1
    # first detector step reuses the forward pass and correspondences of the descriptor steps
    reuse_batch: bool = True
    crop_factor: float = 1.0
    checkpoint_interval: int = 0
    # relative paths are resolved against the output directory of a run
    checkpoint_path: str = "checkpoint.rfnw"
    loss_log: str = "loss_log.csv"

    def __post_init__(self):
        if self.iterations < 0 or self.desc_steps_per_iter < 0 or self.det_steps_per_iter < 0:
            raise ValueError("iteration and step counts must be non-negative")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class DataConfig:
    dataset: str = ""
    width: int = 320
    height: int = 240
    train_ratio: float = 0.9
    split_seed: int = 0
    # use the given split tag of the dataset ("train", "test" or "all")
    split: str = "train"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("train", "loss", "detector", "descriptor", "data")

    def to_text(self) -> str:
        lines = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values: dict[str, dict[str, str]] = {s: {} for s in cls.SECTIONS}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            section, _, name = key.partition(".")
            if section not in values or not name:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            values[section][name] = value
        kwargs = {}
        for section in cls.SECTIONS:
            klass = typing.get_type_hints(cls)[section]
            kwargs[section] = _build(klass, values[section], section, source)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        return cls.from_text(text, str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(value: str, typ, key: str):
    origin = typing.get_origin(typ)
    if typ is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    if typ is str:
        return value
    if typ is tuple or origin is tuple:
        return tuple(int(v) for v in value.split(",") if v.strip())
    raise TypeError(f"unsupported config type {typ!r} for {key}")


def _build(klass, raw: dict[str, str], section: str, source: str):
    hints = typing.get_type_hints(klass)
    names = {f.name for f in dataclasses.fields(klass)}
    kwargs = {}
    for name, value in raw.items():
        if name not in names:
            raise ConfigError(f"{source}: unknown key {section}.{name!s}")
        try:
            kwargs[name] = _parse(value, hints[name], f"{section}.{name}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: bad value for {section}.{name}: {exc}") from None
    try:
        return klass(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{source}: invalid {section} settings: {exc}") from None
