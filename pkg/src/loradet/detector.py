"""Toy oriented detector: Swin backbone, FPN-like neck, RPN stand-in and a two-FC RoI head.

Oriented proposals and rotated RoI Align are replaced by a fixed grid of
axis-aligned 3x3 feature crops, one RoI per feature-map cell of the
configured pyramid levels. The head topology (two shared FCs feeding a
classifier and a box regressor) is unchanged.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ArgumentError, ConfigError, NumericError, ShapeError, StateError
from .geometry import OrientedBox, normalize_angle
from .linalg import Rng
from .lora import LoraLinear
from .swin import BackboneConfig, _normal, backbone_forward, backbone_lora_targets, init_backbone, lora_dense

LORA_SUFFIXES = (".lora_A", ".lora_B")


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fpn_dim: int = 16
    head_hidden: int = 128
    num_classes: int = 2
    roi_levels: tuple[int, ...] = (1,)
    head_ranks: tuple[int, int] = (32, 32)
    anchor_scale: float = 1.5

    def __post_init__(self):
        n = len(self.backbone.dims)
        if not self.roi_levels or any(not 0 <= lv < n for lv in self.roi_levels):
            raise ArgumentError(f"roi levels {self.roi_levels} outside [0, {n})")
        if len(set(self.roi_levels)) != len(self.roi_levels):
            raise ArgumentError("roi levels must be distinct")
        k1 = 9 * self.fpn_dim
        r1, r2 = self.head_ranks
        if not 1 <= r1 <= min(self.head_hidden, k1) or not 1 <= r2 <= self.head_hidden:
            raise ArgumentError(f"head ranks {self.head_ranks} exceed layer dimensions")

    def level_size(self, level: int) -> int:
        return self.backbone.grid // 2**level

    def level_stride(self, level: int) -> float:
        return self.backbone.image_size / self.level_size(level)

    @property
    def num_rois(self) -> int:
        return sum(self.level_size(lv) ** 2 for lv in self.roi_levels)

    def anchors(self) -> np.ndarray:
        """``(R, 3)`` rows of ``(ax, ay, size)`` in RoI order."""
        rows = []
        for lv in self.roi_levels:
            n = self.level_size(lv)
            s = self.level_stride(lv)
            yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            a = np.stack([(xx.ravel() + 0.5) * s, (yy.ravel() + 0.5) * s, np.full(n * n, s * self.anchor_scale)], axis=1)
            rows.append(a)
        return np.concatenate(rows)


def lora_targets(cfg: DetectorConfig) -> list[tuple[str, int]]:
    return backbone_lora_targets(cfg.backbone) + [("head.fc1", cfg.head_ranks[0]), ("head.fc2", cfg.head_ranks[1])]


def init_params(cfg: DetectorConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Base parameters (no adapters) for the whole detector."""
    p = init_backbone(cfg.backbone, rng)
    std = cfg.backbone.init_std
    f = cfg.fpn_dim

    def dense(name, d, k, s=std):
        p[name + ".weight"] = _normal(rng, (d, k), s)
        p[name + ".bias"] = np.zeros(d)

    for i, c in enumerate(cfg.backbone.dims):
        dense(f"neck.lateral.{i}", f, c, 1 / math.sqrt(c))
    for i in range(len(cfg.backbone.dims)):
        dense(f"neck.smooth.{i}", f, 9 * f, 1 / math.sqrt(9 * f))
    dense("rpn.conv", f, 9 * f, 1 / math.sqrt(9 * f))
    dense("rpn.objectness", 1, f, 1 / math.sqrt(f))
    dense("head.fc1", cfg.head_hidden, 9 * f, 1 / math.sqrt(9 * f))
    dense("head.fc2", cfg.head_hidden, cfg.head_hidden, 1 / math.sqrt(cfg.head_hidden))
    dense("head.cls_fc", cfg.num_classes + 1, cfg.head_hidden, 1 / math.sqrt(cfg.head_hidden))
    dense("head.reg_fc", 5, cfg.head_hidden, 1 / math.sqrt(cfg.head_hidden))
    return p


class DetectorModel:
    """Named parameter store plus adapter bookkeeping.

    ``params`` maps hierarchical names to float64 arrays. Adapter pairs are
    stored as ``<prefix>.lora_A`` / ``<prefix>.lora_B`` next to the frozen
    ``<prefix>.weight``.
    """

    def __init__(self, config: DetectorConfig, params: dict[str, np.ndarray], merged: bool = False):
        self.config = config
        self.params = params
        self.merged = merged

    @classmethod
    def create(cls, config: DetectorConfig, seed: int) -> "DetectorModel":
        return cls(config, init_params(config, Rng(seed)))

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.merged)

    # -- adapters ---------------------------------------------------------

    @property
    def lora_prefixes(self) -> list[str]:
        return [k[: -len(".lora_A")] for k in self.params if k.endswith(".lora_A")]

    @property
    def has_lora(self) -> bool:
        return any(k.endswith(".lora_A") for k in self.params)

    def attach_lora(self, rng: Rng, stddev: float | None = None) -> None:
        """Add Gaussian ``A`` / zero ``B`` pairs to every W_q, W_v and head FC."""
        if self.has_lora:
            raise StateError("model already carries LoRA adapters")
        std = self.config.backbone.lora_std if stddev is None else stddev
        for prefix, r in lora_targets(self.config):
            d, k = self.params[prefix + ".weight"].shape
            self.params[prefix + ".lora_A"] = std * rng.normals(r * k).reshape(r, k)
            self.params[prefix + ".lora_B"] = np.zeros((d, r))

    def lora_layer(self, prefix: str) -> LoraLinear:
        """A :class:`LoraLinear` sharing this model's arrays."""
        p = self.params
        return LoraLinear(
            w=p[prefix + ".weight"], a=p[prefix + ".lora_A"], b=p[prefix + ".lora_B"],
            bias=p.get(prefix + ".bias"), merged=self.merged,
        )

    def merge(self) -> None:
        if self.merged:
            raise StateError("model already merged")
        for prefix in self.lora_prefixes:
            self.params[prefix + ".weight"] = self.params[prefix + ".weight"] + self.params[prefix + ".lora_B"] @ self.params[prefix + ".lora_A"]
        self.merged = True

    def unmerge(self) -> None:
        if not self.merged:
            raise StateError("model is not merged")
        for prefix in self.lora_prefixes:
            self.params[prefix + ".weight"] = self.params[prefix + ".weight"] - self.params[prefix + ".lora_B"] @ self.params[prefix + ".lora_A"]
        self.merged = False

    # -- parameter views ----------------------------------------------------

    def base_names(self) -> list[str]:
        return [k for k in self.params if not k.endswith(LORA_SUFFIXES)]

    def base_count(self) -> int:
        return sum(self.params[k].size for k in self.base_names())

    def bind(self, trainable=()) -> dict[str, Tensor]:
        trainable = set(trainable)
        return {k: Tensor(v, requires_grad=k in trainable) for k, v in self.params.items()}

    # -- inference ----------------------------------------------------------

    def forward(self, images, bound: dict[str, Tensor] | None = None) -> dict:
        return detector_forward(self, images, bound)

    def predict(self, images) -> dict[str, np.ndarray]:
        out = self.forward(images)
        return {k: (v.data if isinstance(v, Tensor) else [t.data for t in v]) for k, v in out.items()}


def detector_forward(model: DetectorModel, images, bound: dict[str, Tensor] | None = None) -> dict:
    """Raw head outputs on the fixed RoI grid.

    Returns ``cls`` ``(N, R, classes+1)``, ``reg`` ``(N, R, 5)`` and
    ``obj``, a list of per-level ``(N, H, W)`` objectness logits.
    """
    cfg = model.config
    p = bound if bound is not None else model.bind()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ShapeError(f"expected (N, H, W) images, got {images.shape}")
    feats = backbone_forward(images, p, cfg.backbone, model.merged)
    n_levels = len(feats)
    lat = [ag.linear(f, p[f"neck.lateral.{i}.weight"], p[f"neck.lateral.{i}.bias"]) for i, f in enumerate(feats)]
    top = [None] * n_levels
    top[-1] = lat[-1]
    for i in range(n_levels - 2, -1, -1):
        top[i] = ag.add(lat[i], ag.upsample2(top[i + 1]))
    pyr = [ag.linear(ag.im2col3x3(t), p[f"neck.smooth.{i}.weight"], p[f"neck.smooth.{i}.bias"]) for i, t in enumerate(top)]

    obj = []
    for level in pyr:
        r = ag.gelu(ag.linear(ag.im2col3x3(level), p["rpn.conv.weight"], p["rpn.conv.bias"]))
        o = ag.linear(r, p["rpn.objectness.weight"], p["rpn.objectness.bias"])
        obj.append(ag.reshape(o, o.shape[:3]))

    n = images.shape[0]
    crops = []
    for lv in cfg.roi_levels:
        c = ag.im2col3x3(pyr[lv])
        crops.append(ag.reshape(c, (n, -1, c.shape[-1])))
    x = crops[0] if len(crops) == 1 else ag.concat(crops, axis=1)
    x = ag.gelu(lora_dense(x, p, "head.fc1", model.merged))
    x = ag.gelu(lora_dense(x, p, "head.fc2", model.merged))
    cls = ag.linear(x, p["head.cls_fc.weight"], p["head.cls_fc.bias"])
    reg = ag.linear(x, p["head.reg_fc.weight"], p["head.reg_fc.bias"])
    return {"cls": cls, "reg": reg, "obj": obj}


# ---------------------------------------------------------------------------
# Targets and loss
# ---------------------------------------------------------------------------


def encode_box(box, anchor) -> np.ndarray:
    ax, ay, s = anchor
    cx, cy, w, h, th = box
    return np.array([(cx - ax) / s, (cy - ay) / s, math.log(w / s), math.log(h / s), normalize_angle(th)])


def decode_box(delta, anchor) -> OrientedBox:
    ax, ay, s = anchor
    dx, dy, dw, dh, dt = delta
    dw = min(max(dw, -8.0), 8.0)
    dh = min(max(dh, -8.0), 8.0)
    return OrientedBox(ax + dx * s, ay + dy * s, s * math.exp(dw), s * math.exp(dh), dt)


@dataclass
class Targets:
    """Per-RoI training targets for a batch."""

    labels: np.ndarray  # (N, R) int, 0 = background
    deltas: np.ndarray  # (N, R, 5)
    objectness: list  # per level (N, H, W) in {0, 1}


def assign_targets(cfg: DetectorConfig, boxes_per_image, labels_per_image) -> Targets:
    """Each box goes to the RoI cell containing its centre on the best-sized level."""
    n = len(boxes_per_image)
    anchors = cfg.anchors()
    r = len(anchors)
    labels = np.zeros((n, r), dtype=np.int64)
    deltas = np.zeros((n, r, 5))
    n_levels = len(cfg.backbone.dims)
    objectness = [np.zeros((n, cfg.level_size(i), cfg.level_size(i))) for i in range(n_levels)]
    offsets = {}
    off = 0
    for lv in cfg.roi_levels:
        offsets[lv] = off
        off += cfg.level_size(lv) ** 2
    for i, (boxes, labs) in enumerate(zip(boxes_per_image, labels_per_image)):
        for box, lab in zip(np.asarray(boxes).reshape(-1, 5), np.asarray(labs).reshape(-1)):
            cx, cy, w, h, _ = box
            size = math.sqrt(w * h)
            lv = min(cfg.roi_levels, key=lambda L: abs(math.log(size / (cfg.level_stride(L) * cfg.anchor_scale))))
            for L in range(n_levels):
                g = cfg.level_size(L)
                s = cfg.level_stride(L)
                objectness[L][i, min(int(cy // s), g - 1), min(int(cx // s), g - 1)] = 1.0
            g = cfg.level_size(lv)
            s = cfg.level_stride(lv)
            row, col = min(int(cy // s), g - 1), min(int(cx // s), g - 1)
            idx = offsets[lv] + row * g + col
            labels[i, idx] = int(lab)
            deltas[i, idx] = encode_box(box, anchors[idx])
    return Targets(labels, deltas, objectness)


def detection_loss(pred: dict, targets: Targets, reg_weight: float = 1.0, obj_weight: float = 1.0) -> Tensor:
    """Cross-entropy on RoI classes + smooth-L1 on foreground deltas + objectness BCE."""
    cls, reg = pred["cls"], pred["reg"]
    for t in (cls, reg, *pred["obj"]):
        if not np.all(np.isfinite(t.data)):
            raise NumericError("non-finite prediction in detection loss")
    if not np.all(np.isfinite(targets.deltas)):
        raise NumericError("non-finite regression target")
    n, r, c = cls.shape
    ce = ag.cross_entropy(ag.reshape(cls, (n * r, c)), targets.labels.reshape(-1))
    fg = (targets.labels > 0).astype(np.float64)
    l1 = ag.smooth_l1(reg, targets.deltas, fg)
    loss = ag.add(ce, ag.scale(l1, reg_weight))
    if obj_weight and pred["obj"]:
        terms = [ag.bce_logits(o, t) for o, t in zip(pred["obj"], targets.objectness)]
        obj = terms[0]
        for t in terms[1:]:
            obj = ag.add(obj, t)
        loss = ag.add(loss, ag.scale(obj, obj_weight / len(terms)))
    return loss


def loss_and_grads(model: DetectorModel, images, targets: Targets, trainable) -> tuple[float, dict[str, np.ndarray]]:
    bound = model.bind(trainable)
    loss = detection_loss(detector_forward(model, images, bound), targets)
    loss.backward()
    grads = {}
    for name in trainable:
        g = bound[name].grad
        grads[name] = np.zeros_like(model.params[name]) if g is None else g
    return float(loss.data), grads


def parameter_groups(model: DetectorModel) -> dict[str, list[str]]:
    """Partition names into backbone / neck / rpn / head, adapters separately."""
    groups: dict[str, list[str]] = {"backbone": [], "backbone_lora": [], "neck": [], "rpn": [], "head": [], "head_lora": []}
    for name in model.params:
        top = name.split(".", 1)[0]
        if top not in ("backbone", "neck", "rpn", "head"):
            raise ConfigError(f"parameter {name!r} outside the known modules")
        key = top + "_lora" if name.endswith(LORA_SUFFIXES) else top
        groups[key].append(name)
    return groups


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return copy.deepcopy(params)
