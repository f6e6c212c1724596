"""The synthetic domain-shift protocol: pretrain on D1, fine-tune on D1 + D2, test on both.

Every random draw comes from the experiment seed through named purposes,
so each stage is reproducible on its own.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .config import ExperimentConfig
from .data import SceneSample, mixture, synth_dataset
from .detector import DetectorModel
from .evaluation import Metrics, evaluate
from .linalg import Rng, derive_seed
from .policy import FinetunePolicy, parse_policy
from .training import TrainingLog, train

log = logging.getLogger(__name__)


@dataclass
class Splits:
    pretrain: list[SceneSample]
    finetune: list[SceneSample]
    test: list[SceneSample]


def make_splits(cfg: ExperimentConfig) -> Splits:
    data_seed = derive_seed(cfg.seed, "data")
    d1 = synth_dataset(data_seed, "D1", cfg.n_pretrain)
    d2 = synth_dataset(data_seed, "D2", cfg.n_finetune)
    test = mixture(derive_seed(cfg.seed, "test"), cfg.n_test)
    return Splits(d1, d1 + d2, test)


def pretrain(cfg: ExperimentConfig, samples: list[SceneSample]) -> tuple[DetectorModel, TrainingLog]:
    model = DetectorModel.create(cfg.detector(), derive_seed(cfg.seed, "init"))
    tlog = train(
        model, FinetunePolicy.FULL_FINETUNE, samples, cfg.pretrain_epochs,
        cfg.optimizer(pretrain=True), seed=derive_seed(cfg.seed, "pretrain"),
    )
    return model, tlog


def prepare(base: DetectorModel, policy, cfg: ExperimentConfig) -> DetectorModel:
    """Copy of ``base`` with adapters attached when ``policy`` needs them."""
    model = base.copy()
    if parse_policy(policy).uses_lora and not model.has_lora:
        model.attach_lora(Rng(derive_seed(cfg.seed, "lora")), cfg.lora_std)
    return model


def finetune(base: DetectorModel, policy, samples, cfg: ExperimentConfig, callback=None) -> tuple[DetectorModel, TrainingLog]:
    model = prepare(base, policy, cfg)
    tlog = train(model, policy, samples, cfg.epochs, cfg.optimizer(), seed=derive_seed(cfg.seed, "finetune"), callback=callback)
    return model, tlog


@dataclass(frozen=True)
class PolicyResult:
    policy: str
    ratio: float
    metrics: Metrics


def run_protocol(cfg: ExperimentConfig, policies) -> dict[str, PolicyResult]:
    """Pretrain once, then fine-tune and evaluate each policy from the same checkpoint."""
    splits = make_splits(cfg)
    base, _ = pretrain(cfg, splits.pretrain)
    out = {}
    for name in policies:
        policy = parse_policy(name)
        if policy is FinetunePolicy.PRETRAINED:
            model, ratio = base, 0.0
        else:
            model, tlog = finetune(base, policy, splits.finetune, cfg)
            ratio = tlog.ratio
        metrics = evaluate(model, splits.test)
        log.info("seed %d %s: ratio %.4f AP50 %.4f", cfg.seed, policy.value, ratio, metrics.ap50)
        out[policy.value] = PolicyResult(policy.value, ratio, metrics)
    return out


def gap_recovery(pretrained: float, full: float, candidate: float) -> float:
    """Fraction of the pretrained-to-full AP gap a candidate closes."""
    gap = full - pretrained
    if gap <= 0:
        return float("nan")
    return (candidate - pretrained) / gap
