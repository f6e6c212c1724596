"""Datasets and model checkpoints stored in the tensor archive format."""

from __future__ import annotations

import numpy as np

from .data import DOMAINS, SceneSample
from .delta_package import Role, TensorArchive
from .detector import DetectorConfig, DetectorModel
from .errors import IntegrityError, StateError

_DOMAIN_CODES = {name: i for i, name in enumerate(sorted(DOMAINS))}
_DOMAIN_NAMES = {i: name for name, i in _DOMAIN_CODES.items()}


def dataset_archive(samples: list[SceneSample]) -> TensorArchive:
    """Images, concatenated boxes and labels, per-image object counts and domains."""
    archive = TensorArchive()
    archive.add("images", Role.BASE, np.stack([s.image for s in samples]))
    archive.add("boxes", Role.BASE, np.concatenate([s.boxes for s in samples]).reshape(-1, 5))
    archive.add("labels", Role.BASE, np.concatenate([s.labels for s in samples]).astype(np.float64))
    archive.add("counts", Role.BASE, np.array([len(s.labels) for s in samples], dtype=np.float64))
    archive.add("domains", Role.BASE, np.array([_DOMAIN_CODES.get(s.domain, -1) for s in samples], dtype=np.float64))
    return archive


def samples_from_archive(archive: TensorArchive) -> list[SceneSample]:
    try:
        t = {e.name: e.data.astype(np.float64) for e in archive.entries}
        images, boxes, labels, counts, domains = (t[k] for k in ("images", "boxes", "labels", "counts", "domains"))
    except KeyError as exc:
        raise IntegrityError(f"dataset archive lacks entry {exc.args[0]!r}") from None
    ends = np.cumsum(counts.astype(np.int64))
    if len(images) != len(counts) or (len(ends) and ends[-1] != len(boxes)):
        raise IntegrityError("dataset archive counts do not match its boxes")
    out = []
    start = 0
    for i, end in enumerate(ends):
        out.append(SceneSample(images[i], boxes[start:end], labels[start:end].astype(np.int64), _DOMAIN_NAMES.get(int(domains[i]), "")))
        start = end
    return out


def save_dataset(samples, path) -> int:
    return dataset_archive(samples).write(path)


def load_dataset(path) -> list[SceneSample]:
    return samples_from_archive(TensorArchive.read(path))


def model_archive(model: DetectorModel) -> TensorArchive:
    """Base tensors followed by adapter factors; the model must be unmerged."""
    if model.merged and model.has_lora:
        raise StateError("save the model unmerged so its adapters stay separable")
    archive = TensorArchive()
    for name, v in model.params.items():
        role = Role.LORA_A if name.endswith(".lora_A") else Role.LORA_B if name.endswith(".lora_B") else Role.BASE
        archive.add(name, role, v)
    return archive


def model_from_archive(config: DetectorConfig, archive: TensorArchive) -> DetectorModel:
    """Rebuild a model; names and shapes must match ``config`` exactly."""
    expected = DetectorModel.create(config, 0).params
    params = archive.to_params()
    base = {k: v for k, v in params.items() if not k.endswith((".lora_A", ".lora_B"))}
    if set(base) != set(expected):
        missing = sorted(set(expected) - set(base))
        extra = sorted(set(base) - set(expected))
        raise StateError(f"checkpoint does not match the configured topology (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, v in base.items():
        if v.shape != expected[k].shape:
            raise StateError(f"{k}: checkpoint shape {v.shape} != configured {expected[k].shape}")
    ordered = {k: params[k] for k in expected}
    ordered.update({k: v for k, v in params.items() if k not in expected})
    return DetectorModel(config, ordered)


def save_model(model: DetectorModel, path) -> int:
    return model_archive(model).write(path)


def load_model(config: DetectorConfig, path) -> DetectorModel:
    return model_from_archive(config, TensorArchive.read(path))
