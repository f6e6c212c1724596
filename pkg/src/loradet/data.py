"""Synthetic oriented-object scenes with a controlled domain shift.

Two domains render bright rectangles on a noisy background:

* ``D1``: angles in [-pi/4, pi/4), aspect ratios 1.5-2.5, contrast 1.0.
* ``D2``: angles with |theta| >= pi/4, aspect ratios 2.5-3.5, contrast 0.6.

Class 1 objects have a long side of 9-13 px, class 2 of 16-22 px. Every
sample is generated from its own seed derived from ``(seed, domain, index)``
so datasets are reproducible regardless of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .geometry import OrientedBox, coverage, normalize_angle, rotated_iou
from .linalg import Rng, derive_seed

IMAGE_SIZE = 64
CELL = 8
NOISE_STD = 0.1
CLASS_LENGTHS = {1: (9.0, 13.0), 2: (16.0, 22.0)}
MIN_SHORT_SIDE = 3.0


@dataclass(frozen=True)
class DomainSpec:
    name: str
    angle_bands: tuple[tuple[float, float], ...]
    aspect: tuple[float, float]
    contrast: float
    background: float = 0.0


DOMAINS = {
    "D1": DomainSpec("D1", ((-math.pi / 4, math.pi / 4),), (1.5, 2.5), 1.0),
    "D2": DomainSpec("D2", ((-math.pi / 2, -math.pi / 4), (math.pi / 4, math.pi / 2)), (2.5, 3.5), 0.6),
}


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W) float64
    boxes: np.ndarray  # (k, 5) rows of (cx, cy, w, h, theta)
    labels: np.ndarray  # (k,) int, classes start at 1
    domain: str = ""


def _f32(a) -> np.ndarray:
    """Round to float32 storage precision so cached and in-memory data agree."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _sample_angle(rng: Rng, spec: DomainSpec) -> float:
    widths = [hi - lo for lo, hi in spec.angle_bands]
    u = rng.uniform() * sum(widths)
    for (lo, hi), w in zip(spec.angle_bands, widths):
        if u < w:
            return lo + u
        u -= w
    return spec.angle_bands[-1][1] - 1e-9


def _inside_image(box: OrientedBox, size: int, margin: float = 0.5) -> bool:
    c = box.corners()
    return bool(np.all(c >= margin) and np.all(c <= size - margin))


def render_sample(seed: int, domain: str, index: int, size: int = IMAGE_SIZE, max_objects: int = 3) -> SceneSample:
    if domain not in DOMAINS:
        raise ArgumentError(f"unknown domain {domain!r}; expected one of {sorted(DOMAINS)}")
    spec = DOMAINS[domain]
    rng = Rng(derive_seed(seed, f"{domain}:{index}"))
    grid = size // CELL
    n_obj = 1 + rng.integer(max_objects)
    boxes: list[OrientedBox] = []
    labels: list[int] = []
    used: set[int] = set()
    attempts = 0
    while len(boxes) < n_obj and attempts < 200:
        attempts += 1
        cell = rng.integer(grid * grid)
        label = 1 + rng.integer(len(CLASS_LENGTHS))
        lo, hi = CLASS_LENGTHS[label]
        w = rng.uniform_range(lo, hi)
        aspect = rng.uniform_range(*spec.aspect)
        h = max(w / aspect, MIN_SHORT_SIDE)
        theta = _sample_angle(rng, spec)
        row, col = divmod(cell, grid)
        cx = col * CELL + rng.uniform_range(1.0, CELL - 1.0)
        cy = row * CELL + rng.uniform_range(1.0, CELL - 1.0)
        if cell in used:
            continue
        box = OrientedBox(*_f32([cx, cy, w, h, theta]))
        if not _inside_image(box, size):
            continue
        if any(rotated_iou(box, o) > 0 for o in boxes):
            continue
        boxes.append(box)
        labels.append(label)
        used.add(cell)
    image = spec.background + NOISE_STD * rng.normals(size * size).reshape(size, size)
    for box in boxes:
        image += spec.contrast * coverage(box, size)
    return SceneSample(
        image=_f32(image),
        boxes=np.array([b.to_array() for b in boxes]).reshape(-1, 5),
        labels=np.array(labels, dtype=np.int64),
        domain=domain,
    )


def synth_dataset(seed: int, domain: str, n: int, start: int = 0) -> list[SceneSample]:
    """``n`` scenes from ``domain``; sample ``i`` depends only on ``(seed, domain, start + i)``."""
    if n < 1:
        raise ArgumentError("dataset size must be at least 1")
    return [render_sample(seed, domain, start + i) for i in range(n)]


def mixture(seed: int, n_per_domain: int, start: int = 0) -> list[SceneSample]:
    """Interleaved D1/D2 scenes, ``n_per_domain`` of each."""
    d1 = synth_dataset(seed, "D1", n_per_domain, start)
    d2 = synth_dataset(seed, "D2", n_per_domain, start)
    out = []
    for a, b in zip(d1, d2):
        out.extend((a, b))
    return out


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def angles(samples) -> np.ndarray:
    return np.concatenate([s.boxes[:, 4] for s in samples]) if samples else np.zeros(0)


def flip_sample(sample: SceneSample, horizontal: bool, vertical: bool) -> SceneSample:
    """Mirror a scene; a mirrored rectangle keeps its extents and negates its angle."""
    image = sample.image
    boxes = sample.boxes.copy()
    size = image.shape[0]
    if horizontal:
        image = image[:, ::-1]
        boxes[:, 0] = size - boxes[:, 0]
        boxes[:, 4] = -boxes[:, 4]
    if vertical:
        image = image[::-1, :]
        boxes[:, 1] = size - boxes[:, 1]
        boxes[:, 4] = -boxes[:, 4]
    boxes[:, 4] = [normalize_angle(t) for t in boxes[:, 4]]
    return SceneSample(np.ascontiguousarray(image), boxes, sample.labels.copy(), sample.domain)
