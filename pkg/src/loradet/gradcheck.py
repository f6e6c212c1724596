"""Central finite-difference checks of the analytic gradients.

Three subjects: an isolated adapter layer, a two-block Swin stage and the
full toy detector under each fine-tuning policy. Parameters are perturbed
away from their initial values first (adapter ``B`` non-zero, norms and
biases randomised) so that no gradient is trivially zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import mixture, stack_images
from .detector import DetectorConfig, DetectorModel, assign_targets, detection_loss, detector_forward, loss_and_grads, lora_targets
from .linalg import Rng
from .lora import LoraLinear, lora_backward, lora_forward
from .policy import FinetunePolicy, parse_policy, trainable_names
from .swin import BackboneConfig, init_backbone, swin_block_pair_forward

STEP = 1e-5
FLOOR = 1e-4


@dataclass
class GradReport:
    subject: str
    checked: int = 0
    max_rel_error: float = 0.0
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def add(self, label: str, analytic: float, numeric: float, tol: float) -> None:
        err = relative_error(analytic, numeric)
        self.checked += 1
        if err > self.max_rel_error:
            self.max_rel_error, self.worst = err, label
        if err > tol:
            self.failures.append(f"{label}: analytic {analytic:.6e} numeric {numeric:.6e} rel {err:.2e}")

    def __str__(self) -> str:
        status = "ok" if self.ok else f"{len(self.failures)} FAILED"
        return f"{self.subject}: {self.checked} scalars, max rel error {self.max_rel_error:.2e} ({status})"


def relative_error(a: float, b: float, floor: float = FLOOR) -> float:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero gradients from dominating."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(f, x: np.ndarray, index, h: float = STEP) -> float:
    """Central difference of scalar ``f()`` in ``x[index]``; ``x`` is restored afterwards."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def check_lora_linear(seed: int = 0, d: int = 6, k: int = 5, rank: int = 3, batch: int = 4, tol: float = 1e-6) -> GradReport:
    """Every scalar of ``A``, ``B`` and the input of one adapter layer."""
    rng = np.random.default_rng(seed)
    layer = LoraLinear(w=rng.normal(size=(d, k)), a=rng.normal(size=(rank, k)), b=rng.normal(size=(d, rank)), bias=rng.normal(size=d))
    x = rng.normal(size=(k, batch))
    up = rng.normal(size=(d, batch))

    def loss():
        return float(np.sum(up * lora_forward(layer, x)))

    ga, gb, gx = lora_backward(layer, x, up)
    rep = GradReport("LoraLinear")
    for name, arr, g in (("A", layer.a, ga), ("B", layer.b, gb), ("x", x, gx)):
        for idx in np.ndindex(arr.shape):
            rep.add(f"{name}{list(idx)}", float(g[idx]), numeric_grad(loss, arr, idx), tol)
    return rep


def _jitter(params: dict[str, np.ndarray], rng: np.random.Generator) -> None:
    """Move norms, biases and zero-initialised tensors off their special values."""
    for name, v in params.items():
        if name.endswith((".bias", ".lora_B")) or ".norm" in name:
            params[name] = v + rng.normal(scale=0.3, size=v.shape)


def _add_adapters(params, targets, rng: np.random.Generator) -> None:
    for prefix, r in targets:
        d, k = params[prefix + ".weight"].shape
        params[prefix + ".lora_A"] = rng.normal(scale=0.3, size=(r, k))
        params[prefix + ".lora_B"] = rng.normal(scale=0.3, size=(d, r))


def tiny_stage_config() -> BackboneConfig:
    return BackboneConfig(image_size=8, patch=2, dims=(8,), depths=(2,), heads=(2,), window=2, ranks=(2,), init_std=0.3)


def check_swin_stage(seed: int = 0, tol: float = 1e-4) -> GradReport:
    """Every parameter scalar of a regular + shifted block pair, adapters included."""
    cfg = tiny_stage_config()
    stage = cfg.stages[0]
    rng = np.random.default_rng(seed)
    prefix = "backbone.stages.0"
    params = {k: v for k, v in init_backbone(cfg, Rng(seed)).items() if k.startswith(prefix + ".blocks.")}
    _add_adapters(params, [(f"{prefix}.blocks.{b}.attn.{n}", 2) for b in range(2) for n in ("wq", "wv")], rng)
    _jitter(params, rng)
    x = rng.normal(size=(2, stage.resolution, stage.resolution, stage.dim))
    weight = rng.normal(size=x.shape)

    def loss():
        consts = {k: Tensor(v) for k, v in params.items()}
        return float(np.sum(weight * swin_block_pair_forward(x, consts, prefix, stage)))

    bound = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = swin_block_pair_forward(Tensor(x), bound, prefix, stage)
    ag.total(ag.mul(out, Tensor(weight))).backward()
    rep = GradReport("Swin stage (2 blocks)")
    for name, arr in params.items():
        g = bound[name].grad
        for idx in np.ndindex(arr.shape):
            rep.add(f"{name}{list(idx)}", float(g[idx]), numeric_grad(loss, arr, idx), tol)
    return rep


def tiny_detector_config() -> DetectorConfig:
    backbone = BackboneConfig(
        image_size=16, patch=2, dims=(4, 8, 16), depths=(2, 2, 2), heads=(1, 2, 2),
        window=2, mlp_ratio=2, ranks=(2, 2, 2), init_std=0.3,
    )
    return DetectorConfig(backbone=backbone, fpn_dim=4, head_hidden=8, head_ranks=(2, 2))


def _tiny_batch(cfg: DetectorConfig, seed: int):
    """Two crops of synthetic scenes, downsampled to the tiny image size."""
    samples = mixture(seed, 1)
    factor = 64 // cfg.backbone.image_size
    images = stack_images(samples)[:, ::factor, ::factor].copy()
    boxes = [s.boxes / np.array([factor, factor, factor, factor, 1.0]) for s in samples]
    return images, assign_targets(cfg, boxes, [s.labels for s in samples])


def check_detector(policies=None, seed: int = 0, tol: float = 1e-4) -> list[GradReport]:
    """Each policy's trainable scalars; finite differences are shared across policies."""
    cfg = tiny_detector_config()
    rng = np.random.default_rng(seed)
    model = DetectorModel.create(cfg, seed)
    _add_adapters(model.params, lora_targets(cfg), rng)
    _jitter(model.params, rng)
    images, targets = _tiny_batch(cfg, seed)

    def loss():
        return float(detection_loss(detector_forward(model, images), targets).data)

    cache: dict[tuple, float] = {}
    policies = [p for p in FinetunePolicy if p is not FinetunePolicy.PRETRAINED] if policies is None else policies
    reports = []
    for policy in policies:
        names = trainable_names(model, policy)
        _, grads = loss_and_grads(model, images, targets, names)
        rep = GradReport(f"detector/{parse_policy(policy).value}")
        for name in names:
            arr = model.params[name]
            for idx in np.ndindex(arr.shape):
                key = (name, idx)
                if key not in cache:
                    cache[key] = numeric_grad(loss, arr, idx)
                rep.add(f"{name}{list(idx)}", float(grads[name][idx]), cache[key], tol)
        reports.append(rep)
    return reports
