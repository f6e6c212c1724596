"""Adam with decoupled weight decay, applied to a policy's trainable tensors only."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import SceneSample, flip_sample, stack_images
from .detector import DetectorModel, Targets, assign_targets, detection_loss, detector_forward, loss_and_grads
from .errors import NumericError, TrainingError
from .linalg import Rng
from .policy import apply_policy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 4
    flip: bool = True


class Adam:
    def __init__(self, params: dict[str, np.ndarray], names, cfg: OptimizerConfig):
        self.params = params
        self.names = list(names)
        self.cfg = cfg
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for n in self.names:
            g = grads[n]
            m = self.m[n]
            v = self.v[n]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p = self.params[n]
            # Replace rather than mutate: frozen copies elsewhere may alias.
            p = p * (1.0 - c.lr * c.weight_decay) - c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            self.params[n] = p


@dataclass
class TrainingLog:
    policy: str
    trainable_count: int
    total_count: int
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else self.initial_loss

    @property
    def ratio(self) -> float:
        return self.trainable_count / self.total_count


def dataset_targets(model: DetectorModel, samples: list[SceneSample]) -> Targets:
    return assign_targets(model.config, [s.boxes for s in samples], [s.labels for s in samples])


def _slice_targets(t: Targets, idx) -> Targets:
    return Targets(t.labels[idx], t.deltas[idx], [o[idx] for o in t.objectness])


def dataset_loss(model: DetectorModel, samples, batch_size: int = 16) -> float:
    """Mean per-batch loss over ``samples`` without building a gradient graph."""
    images = stack_images(samples)
    targets = dataset_targets(model, samples)
    losses, weights = [], []
    for lo in range(0, len(samples), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(samples)))
        pred = detector_forward(model, images[idx])
        losses.append(float(detection_loss(pred, _slice_targets(targets, idx)).data))
        weights.append(len(idx))
    return float(np.average(losses, weights=weights))


def _permutation(rng: Rng, n: int) -> np.ndarray:
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.integer(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.intp)


def train(
    model: DetectorModel,
    policy,
    samples: list[SceneSample],
    epochs: int,
    optimizer: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    callback=None,
) -> TrainingLog:
    """Fine-tune ``model`` in place; tensors outside the policy's mask are never touched."""
    mask = apply_policy(model, policy)
    names = list(mask.trainable)
    images = stack_images(samples)
    targets = dataset_targets(model, samples)
    try:
        initial = dataset_loss(model, samples)
    except NumericError as exc:
        raise TrainingError(f"initial loss is not finite: {exc}", epoch=0) from exc
    log_ = TrainingLog(mask.policy, mask.trainable_count, mask.total_count, initial)
    if not math.isfinite(log_.initial_loss):
        raise TrainingError("initial loss is not finite", epoch=0)
    opt = Adam(model.params, names, optimizer)
    rng = Rng(seed)
    bs = optimizer.batch_size
    for epoch in range(1, epochs + 1):
        perm = _permutation(rng, len(samples))
        total, count = 0.0, 0
        for lo in range(0, len(perm), bs):
            idx = perm[lo : lo + bs]
            if optimizer.flip:
                batch = [flip_sample(samples[i], rng.uniform() < 0.5, rng.uniform() < 0.5) for i in idx]
                batch_x, batch_t = stack_images(batch), dataset_targets(model, batch)
            else:
                batch_x, batch_t = images[idx], _slice_targets(targets, idx)
            try:
                if names:
                    loss, grads = loss_and_grads(model, batch_x, batch_t, names)
                    if not all(np.all(np.isfinite(g)) for g in grads.values()):
                        raise TrainingError(f"non-finite gradient in epoch {epoch}", epoch)
                    opt.step(grads)
                else:
                    loss = float(detection_loss(detector_forward(model, batch_x), batch_t).data)
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
            if not math.isfinite(loss):
                raise TrainingError(f"loss became NaN in epoch {epoch}", epoch)
            total += loss * len(idx)
            count += len(idx)
        log_.epoch_losses.append(total / count)
        log.info("epoch %d/%d loss %.5f", epoch, epochs, log_.epoch_losses[-1])
        if callback is not None:
            callback(epoch, log_.epoch_losses[-1])
    return log_
