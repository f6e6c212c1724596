"""Fine-tuning policies: which named tensors train and which stay frozen."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from fractions import Fraction

from .detector import DetectorModel, parameter_groups
from .errors import ConfigError


class FinetunePolicy(enum.Enum):
    PRETRAINED = "Pretrained"
    FULL_FINETUNE = "FullFinetune"
    BACKBONE_ONLY = "BackboneOnly"
    HEAD_ONLY = "HeadOnly"
    LORA_BACKBONE_FULL_HEAD = "LoraBackboneFullHead"
    LORA_DET = "LoraDet"
    LORA_DET_HYBRID = "LoraDetHybrid"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def uses_lora(self) -> bool:
        return self in (FinetunePolicy.LORA_BACKBONE_FULL_HEAD, FinetunePolicy.LORA_DET, FinetunePolicy.LORA_DET_HYBRID)


_LABELS = {
    FinetunePolicy.PRETRAINED: "Pre-trained",
    FinetunePolicy.FULL_FINETUNE: "Full fine-tune",
    FinetunePolicy.BACKBONE_ONLY: "Full fine-tune backbone only",
    FinetunePolicy.HEAD_ONLY: "Full fine-tune head only",
    FinetunePolicy.LORA_BACKBONE_FULL_HEAD: "LoRA",
    FinetunePolicy.LORA_DET: "LoRA-Det",
    FinetunePolicy.LORA_DET_HYBRID: "LoRA-Det (hybrid)",
}

_ALIASES = {
    "full": FinetunePolicy.FULL_FINETUNE,
    "lora": FinetunePolicy.LORA_BACKBONE_FULL_HEAD,
    "loradethybrid": FinetunePolicy.LORA_DET_HYBRID,
    "hybrid": FinetunePolicy.LORA_DET_HYBRID,
    "fullfinetunebackboneonly": FinetunePolicy.BACKBONE_ONLY,
    "fullfinetuneheadonly": FinetunePolicy.HEAD_ONLY,
}


def _key(s: str) -> str:
    return re.sub(r"[^a-z0-9]", "", s.lower())


def policy_names() -> list[str]:
    return [p.value for p in FinetunePolicy]


def parse_policy(name: str) -> FinetunePolicy:
    """Accepts canonical names, table labels and hyphenated forms such as ``LoRA-Det-hybrid``."""
    if isinstance(name, FinetunePolicy):
        return name
    key = _key(name)
    for p in FinetunePolicy:
        if key in (_key(p.value), _key(p.label)):
            return p
    if key in _ALIASES:
        return _ALIASES[key]
    raise ConfigError(f"unknown policy {name!r}; valid names: {', '.join(policy_names())}")


def trainable_names(model: DetectorModel, policy: FinetunePolicy) -> list[str]:
    """Names trained under ``policy``, in model order."""
    policy = parse_policy(policy)
    if policy.uses_lora and not model.has_lora:
        raise ConfigError(f"policy {policy.value} needs LoRA adapters on the model")
    g = parameter_groups(model)
    heads_dense = [n for n in g["head"] if n.startswith(("head.cls_fc.", "head.reg_fc."))]
    chosen = {
        FinetunePolicy.PRETRAINED: [],
        FinetunePolicy.FULL_FINETUNE: g["backbone"] + g["neck"] + g["rpn"] + g["head"],
        FinetunePolicy.BACKBONE_ONLY: g["backbone"],
        FinetunePolicy.HEAD_ONLY: g["neck"] + g["rpn"] + g["head"],
        FinetunePolicy.LORA_BACKBONE_FULL_HEAD: g["backbone_lora"] + g["neck"] + g["rpn"] + g["head"],
        FinetunePolicy.LORA_DET: g["backbone_lora"] + g["head_lora"] + heads_dense,
        FinetunePolicy.LORA_DET_HYBRID: g["backbone_lora"] + g["neck"] + g["rpn"] + g["head_lora"] + heads_dense,
    }[policy]
    order = {n: i for i, n in enumerate(model.params)}
    return sorted(set(chosen), key=order.__getitem__)


@dataclass(frozen=True)
class PolicyMask:
    policy: str
    trainable: tuple[str, ...]
    trainable_count: int
    total_count: int

    @property
    def ratio(self) -> float:
        return self.trainable_count / self.total_count

    @property
    def ratio_exact(self) -> Fraction:
        return Fraction(self.trainable_count, self.total_count)

    def __contains__(self, name: str) -> bool:
        return name in self.trainable


def apply_policy(model: DetectorModel, policy) -> PolicyMask:
    """Trainable mask and counts; ``total`` is the base (non-adapter) parameter count.

    ``policy`` is a :class:`FinetunePolicy`, a policy name, or an explicit
    iterable of tensor names.
    """
    if isinstance(policy, (str, FinetunePolicy)):
        policy = parse_policy(policy)
        names = trainable_names(model, policy)
        label = policy.value
    else:
        names = list(policy)
        unknown = [n for n in names if n not in model.params]
        if unknown:
            raise ConfigError(f"unknown tensor name(s) in policy: {', '.join(unknown)}")
        order = {n: i for i, n in enumerate(model.params)}
        names = sorted(set(names), key=order.__getitem__)
        label = "custom"
    count = sum(model.params[n].size for n in names)
    return PolicyMask(label, tuple(names), count, model.base_count())
