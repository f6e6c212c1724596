"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Tuple-valued keys take
comma-separated integers. Relative paths resolve against the config file's
directory. Recognised keys and their defaults are the fields of
:class:`ExperimentConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .detector import DetectorConfig
from .errors import ConfigError, LoraDetError
from .policy import parse_policy
from .swin import BackboneConfig
from .training import OptimizerConfig


@dataclass(frozen=True)
class ExperimentConfig:
    # topology
    image_size: int = 64
    patch: int = 4
    dims: tuple[int, ...] = (16, 32, 64, 128)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (2, 2, 2, 2)
    window: int = 4
    mlp_ratio: int = 4
    fpn_dim: int = 16
    head_hidden: int = 128
    num_classes: int = 2
    # adapters
    backbone_ranks: tuple[int, ...] = (8, 8, 8, 8)
    head_ranks: tuple[int, ...] = (32, 32)
    lora_std: float = 0.02
    # training
    policy: str = "LoraDetHybrid"
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 15
    flip: bool = True
    pretrain_lr: float = 2e-3
    pretrain_epochs: int = 30
    # data
    seed: int = 0
    n_pretrain: int = 128
    n_finetune: int = 128
    n_test: int = 64
    work_dir: str = "ldet_work"

    def __post_init__(self):
        try:
            self.detector()
        except LoraDetError as exc:
            raise ConfigError(f"invalid topology or ranks: {exc}") from exc
        parse_policy(self.policy)
        for key in ("n_pretrain", "n_finetune", "n_test", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1")
        for key in ("epochs", "pretrain_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must not be negative")
        if not (self.lr > 0 and self.pretrain_lr > 0 and self.weight_decay >= 0):
            raise ConfigError("learning rates must be positive and weight decay non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def detector(self) -> DetectorConfig:
        if len(self.head_ranks) != 2:
            raise ConfigError("head_ranks needs exactly two values (fc1, fc2)")
        backbone = BackboneConfig(
            image_size=self.image_size,
            patch=self.patch,
            dims=tuple(self.dims),
            depths=tuple(self.depths),
            heads=tuple(self.heads),
            window=self.window,
            mlp_ratio=self.mlp_ratio,
            ranks=tuple(self.backbone_ranks),
            lora_std=self.lora_std,
        )
        return DetectorConfig(
            backbone=backbone,
            fpn_dim=self.fpn_dim,
            head_hidden=self.head_hidden,
            num_classes=self.num_classes,
            head_ranks=tuple(self.head_ranks),
        )

    def optimizer(self, pretrain: bool = False) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.pretrain_lr if pretrain else self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            flip=self.flip,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str, base_dir: Path | None = None, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if base_dir is not None and "work_dir" in values and not Path(values["work_dir"]).is_absolute():
        values["work_dir"] = str(Path(base_dir) / values["work_dir"])
    return ExperimentConfig(**values)


def load_config(path=None, **overrides) -> ExperimentConfig:
    if path is None:
        return parse_config("", **overrides)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_config(text, base_dir=p.parent, **overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        lines.append(f"{name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
