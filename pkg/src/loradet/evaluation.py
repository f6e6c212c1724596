"""Single-threshold detection metrics with greedy IoU matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import softmax
from .data import SceneSample, stack_images
from .detector import DetectorModel, assign_targets, decode_box
from .errors import ArgumentError
from .geometry import OrientedBox, rotated_iou

SCORE_FLOOR = 0.05


@dataclass(frozen=True)
class Detection:
    image: int
    label: int
    score: float
    box: OrientedBox


@dataclass(frozen=True)
class Metrics:
    ap50: float
    per_class_ap: dict
    mean_iou: float
    cls_accuracy: float
    num_detections: int
    num_gt: int

    def as_dict(self) -> dict:
        return {
            "ap50": self.ap50,
            "mean_iou": self.mean_iou,
            "cls_accuracy": self.cls_accuracy,
            "num_detections": self.num_detections,
            "num_gt": self.num_gt,
            **{f"ap50_class{k}": v for k, v in sorted(self.per_class_ap.items())},
        }


def precision_recall(tp: np.ndarray, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    return ctp / np.maximum(ctp + cfp, 1), ctp / max(num_gt, 1)


def ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the stepwise PR curve: sum of precision at each recall increment."""
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def match_class(dets: list[Detection], gts: dict[int, list[OrientedBox]], thr: float):
    """Greedy matching in descending score order; returns (tp flags, matched IoUs)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    ious = []
    for rank, i in enumerate(order):
        d = dets[i]
        cand = gts.get(d.image, [])
        best, best_j = thr, -1
        for j, g in enumerate(cand):
            if used[d.image][j]:
                continue
            iou = rotated_iou(d.box, g)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            used[d.image][best_j] = True
            tp[rank] = 1.0
            ious.append(best)
    return tp, ious


def average_precision(detections: list[Detection], ground_truth: dict[int, list[tuple[int, OrientedBox]]], iou_threshold: float = 0.5):
    """Mean over classes with ground truth of single-threshold AP.

    ``ground_truth`` maps image index to ``(label, box)`` pairs. Returns
    ``(mAP, per-class AP, matched IoUs)``.
    """
    labels = sorted({lab for items in ground_truth.values() for lab, _ in items})
    per_class = {}
    all_ious = []
    for lab in labels:
        gts = {img: [b for l, b in items if l == lab] for img, items in ground_truth.items()}
        n_gt = sum(len(v) for v in gts.values())
        dets = [d for d in detections if d.label == lab]
        if not dets:
            per_class[lab] = 0.0
            continue
        tp, ious = match_class(dets, gts, iou_threshold)
        all_ious.extend(ious)
        prec, rec = precision_recall(tp, n_gt)
        per_class[lab] = ap_from_pr(prec, rec)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return m, per_class, all_ious


def detections_from_outputs(model: DetectorModel, outputs: dict, image_offset: int = 0, score_floor: float = SCORE_FLOOR):
    """Decode RoI-grid outputs; score = sqrt(P(foreground) * sigmoid(objectness))."""
    cfg = model.config
    anchors = cfg.anchors()
    probs = softmax(outputs["cls"], axis=-1)
    obj_cells = []
    for lv in cfg.roi_levels:
        o = outputs["obj"][lv]
        obj_cells.append(o.reshape(o.shape[0], -1))
    obj = 1.0 / (1.0 + np.exp(-np.concatenate(obj_cells, axis=1)))
    out = []
    n, r, _ = probs.shape
    for i in range(n):
        fg = 1.0 - probs[i, :, 0]
        score = np.sqrt(fg * obj[i])
        labels = 1 + np.argmax(probs[i, :, 1:], axis=-1)
        for j in np.nonzero(score >= score_floor)[0]:
            out.append(Detection(image_offset + i, int(labels[j]), float(score[j]), decode_box(outputs["reg"][i, j], anchors[j])))
    return out


def predict_dataset(model: DetectorModel, samples: list[SceneSample], batch_size: int = 16):
    dets = []
    accs = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        outputs = model.predict(stack_images(chunk))
        dets.extend(detections_from_outputs(model, outputs, lo))
        t = assign_targets(model.config, [s.boxes for s in chunk], [s.labels for s in chunk])
        fg = t.labels > 0
        accs.extend((np.argmax(outputs["cls"], axis=-1)[fg] == t.labels[fg]).tolist())
    return dets, accs


def evaluate(model: DetectorModel, samples: list[SceneSample], iou_threshold: float = 0.5) -> Metrics:
    if not samples:
        raise ArgumentError("cannot evaluate on an empty dataset")
    dets, accs = predict_dataset(model, samples)
    gt = {i: [(int(l), OrientedBox.from_array(b)) for b, l in zip(s.boxes, s.labels)] for i, s in enumerate(samples)}
    m, per_class, ious = average_precision(dets, gt, iou_threshold)
    return Metrics(
        ap50=m,
        per_class_ap=per_class,
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        cls_accuracy=float(np.mean(accs)) if accs else 0.0,
        num_detections=len(dets),
        num_gt=sum(len(s.labels) for s in samples),
    )
