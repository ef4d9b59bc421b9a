"""Inference (score, NMS, top-k) and COCO-style AP/AR over IoU 0.50:0.95."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import BoundingBox, DatasetSplit, Scene, harmonic_mean, iou_matrix
from .detector import DetectorState, forward, region_descriptors
from .losses import apply_deltas, scaled_softmax

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MAX_DETECTIONS = 100
NMS_IOU = 0.5
RECALL_POINTS = np.linspace(0, 1, 101)


@dataclass(frozen=True)
class Detection:
    scene_id: int
    box: BoundingBox
    cls: int
    score: float


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = NMS_IOU) -> np.ndarray:
    """Indices kept by greedy non-maximum suppression, highest score first."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        suppressed[pos + 1:] |= ious[i, rest] >= iou_thr
    return np.array(keep, dtype=int)


def top_k(dets: list[Detection], k: int = MAX_DETECTIONS) -> list[Detection]:
    order = np.argsort([-d.score for d in dets], kind="stable")
    return [dets[i] for i in order[:k]]


def _valid_boxes(boxes: np.ndarray, fallback: np.ndarray, extent: float) -> np.ndarray:
    b = np.clip(boxes, 0, extent)
    bad = (b[:, 2] - b[:, 0] <= 1e-6) | (b[:, 3] - b[:, 1] <= 1e-6)
    b[bad] = fallback[bad]
    return b


def infer(state: DetectorState, scene: Scene, max_detections: int = MAX_DETECTIONS,
          nms_iou: float = NMS_IOU) -> list[Detection]:
    if not scene.proposals:
        return []
    props = np.array([p.box.as_tuple() for p in scene.proposals])
    fw = forward(state, region_descriptors(scene, props))
    boxes = _valid_boxes(apply_deltas(props, fw.deltas), props, scene.extent)
    probs = scaled_softmax(fw.logits)
    dets = []
    for k, cls in enumerate(state.classes):
        s = probs[:, k + 1]
        for i in nms(boxes, s, nms_iou):
            dets.append(Detection(scene.scene_id, BoundingBox(*boxes[i]), cls, float(s[i])))
    return top_k(dets, max_detections)


def greedy_match(det_boxes: np.ndarray, gt_boxes: np.ndarray, thr: float) -> np.ndarray:
    """Match score-ordered detections to the best still-free ground truth with IoU >= thr.

    Returns, per detection, the matched ground-truth index or -1.
    """
    det_boxes = np.asarray(det_boxes, dtype=float).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    out = np.full(len(det_boxes), -1, dtype=int)
    if len(gt_boxes) == 0 or len(det_boxes) == 0:
        return out
    ious = iou_matrix(det_boxes, gt_boxes)
    free = np.ones(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        cand = np.where(free & (ious[d] >= thr), ious[d], -1.0)
        g = int(cand.argmax())
        if cand[g] >= 0:
            out[d] = g
            free[g] = False
    return out


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _class_tp(detections: Iterable[Detection], ground_truths: Iterable[tuple[int, BoundingBox, int]], cls: int,
              thresholds: Sequence[float]):
    """Per-threshold TP flags of the class's score-sorted detections, and the GT count."""
    gts = defaultdict(list)
    for sid, box, c in ground_truths:
        if c == cls:
            gts[sid].append(box.as_tuple())
    dets = [d for d in detections if d.cls == cls]
    order = np.argsort([-d.score for d in dets], kind="stable")
    dets = [dets[i] for i in order]
    n_gt = sum(len(v) for v in gts.values())
    by_scene = defaultdict(list)
    for pos, d in enumerate(dets):
        by_scene[d.scene_id].append(pos)
    tps = np.zeros((len(thresholds), len(dets)))
    for sid, positions in by_scene.items():
        if sid not in gts:
            continue
        boxes = np.array([dets[p].box.as_tuple() for p in positions])
        for t, thr in enumerate(thresholds):
            m = greedy_match(boxes, np.array(gts[sid]), thr)
            tps[t, positions] = m >= 0
    return tps, n_gt


def average_precision(detections: Iterable[Detection], ground_truths: Iterable[tuple[int, BoundingBox, int]],
                      cls: int, iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    """101-point interpolated AP averaged over the IoU thresholds, in percent; NaN without ground truth."""
    tps, n_gt = _class_tp(list(detections), list(ground_truths), cls, iou_thresholds)
    if n_gt == 0:
        return float("nan")
    return 100.0 * float(np.mean([_interpolated_ap(tp, n_gt) for tp in tps]))


def average_recall(detections: Iterable[Detection], ground_truths: Iterable[tuple[int, BoundingBox, int]],
                   cls: int, iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    tps, n_gt = _class_tp(list(detections), list(ground_truths), cls, iou_thresholds)
    if n_gt == 0:
        return float("nan")
    return 100.0 * float(np.mean(tps.sum(axis=1) / n_gt))


def ground_truths(split: DatasetSplit) -> list[tuple[int, BoundingBox, int]]:
    return [(s.scene_id, inst.box, inst.cls) for s, _, inst in split.annotations()]


@dataclass
class EvalReport:
    base_ap: float | None
    base_ar: float | None
    novel_ap: float | None
    novel_ar: float | None
    hm_ap: float | None
    hm_ar: float | None
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    FIELDS = ("base_ap", "base_ar", "novel_ap", "novel_ar", "hm_ap", "hm_ar")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.FIELDS}
        d["per_class"] = {str(c): v for c, v in sorted(self.per_class.items())}
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(*(d[k] for k in cls.FIELDS), {int(c): v for c, v in d.get("per_class", {}).items()})

    def summary(self) -> str:
        def f(v):
            return "  -  " if v is None else f"{v:5.1f}"
        return " ".join(f"{k}={f(getattr(self, k))}" for k in self.FIELDS)


def _domain_mean(per_class, classes, key):
    vals = [per_class[c][key] for c in classes if c in per_class and not np.isnan(per_class[c][key])]
    return float(np.mean(vals)) if vals else None


def evaluate(state: DetectorState, split: DatasetSplit, base_classes: Sequence[int],
             novel_classes: Sequence[int]) -> EvalReport:
    dets = [d for scene in split.scenes for d in infer(state, scene)]
    gts = ground_truths(split)
    registered = set(state.classes)
    per_class = {}
    for c in sorted(registered):
        per_class[c] = {"ap": average_precision(dets, gts, c), "ar": average_recall(dets, gts, c)}
    base = [c for c in base_classes if c in registered]
    novel = [c for c in novel_classes if c in registered]
    b_ap, b_ar = _domain_mean(per_class, base, "ap"), _domain_mean(per_class, base, "ar")
    n_ap, n_ar = _domain_mean(per_class, novel, "ap"), _domain_mean(per_class, novel, "ar")
    hm_ap = harmonic_mean(b_ap, n_ap) if b_ap is not None and n_ap is not None else None
    hm_ar = harmonic_mean(b_ar, n_ar) if b_ar is not None and n_ar is not None else None
    return EvalReport(b_ap, b_ar, n_ap, n_ar, hm_ap, hm_ar, per_class)
