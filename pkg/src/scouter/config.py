"""TOML run configuration: training, data, backbone, and head sections."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from .backbone import BackboneConfig
from .data import MNIST_MEAN, MNIST_STD
from .errors import ConfigError
from .model import ModelConfig
from .xslot import XSlotConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataConfig:
    kind: str = "mnist"  # mnist | image_dir
    root: Optional[str] = None
    manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    image_size: Optional[List[int]] = None
    mean: List[float] = field(default_factory=lambda: [MNIST_MEAN])
    std: List[float] = field(default_factory=lambda: [MNIST_STD])
    train_subset: Optional[int] = 10000
    test_subset: Optional[int] = None
    taxonomy: Optional[str] = None
    category_names: Optional[List[str]] = None

    def __post_init__(self):
        if self.kind not in ("mnist", "image_dir"):
            raise ConfigError(f"data.kind must be 'mnist' or 'image_dir', got {self.kind!r}")
        if len(self.mean) != len(self.std):
            raise ConfigError("data.mean and data.std need one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ConfigError("data.std entries must be positive")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    lambda_warmup_epochs: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")

    @property
    def head(self) -> str:
        return self.model.head

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("epochs", "batch_size", "learning_rate", "weight_decay", "seed", "lambda_warmup_epochs")}
        d["head"] = self.model.head
        return {
            "train": d,
            "data": {k: v for k, v in asdict(self.data).items() if v is not None},
            "backbone": asdict(self.model.backbone),
            "xslot": asdict(self.model.xslot),
        }

    def replace(self, **changes) -> "TrainConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"xslot.lam": 10})``."""
        d = self.to_dict()
        for key, value in changes.items():
            section, _, name = key.rpartition(".")
            d.setdefault(section or "train", {})[name] = value
        return from_dict(d)


_SECTIONS = {
    "train": {"epochs", "batch_size", "learning_rate", "weight_decay", "seed", "head", "lambda_warmup_epochs"},
    "data": {f.name for f in dataclasses.fields(DataConfig)},
    "backbone": {f.name for f in dataclasses.fields(BackboneConfig)},
    "xslot": {f.name for f in dataclasses.fields(XSlotConfig)} | {"lambda"},
}


def from_dict(d: dict) -> TrainConfig:
    for section, values in d.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in values:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    train = dict(d.get("train", {}))
    head = train.pop("head", "scouter")
    xs = dict(d.get("xslot", {}))
    if "lambda" in xs:
        xs["lam"] = xs.pop("lambda")
    try:
        model = ModelConfig(head=head, backbone=BackboneConfig(**d.get("backbone", {})), xslot=XSlotConfig(**xs))
        return TrainConfig(model=model, data=DataConfig(**d.get("data", {})), **train)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def load_config(path) -> TrainConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {type(v)} as TOML")


def dump_config(config: TrainConfig) -> str:
    """Fully resolved config as TOML text (round-trips through ``load_config``)."""
    lines = []
    for section, values in config.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items() if v is not None)
        lines.append("")
    return "\n".join(lines)
