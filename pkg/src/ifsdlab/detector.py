"""Toy two-part detector with hand-written backpropagation.

Region descriptor -> frozen class-agnostic projection (tanh) -> class-sensitive
extractor (two tanh layers) -> objectness / classifier / box-regression heads.
Classifier row 0 is background; registered class ``k`` (in registration order)
owns row ``k + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core import BoundingBox, Scene, iou_matrix
from .rng import substream

PARAM_ORDER = (
    "agnostic.W",
    "cse.W1", "cse.b1", "cse.W2", "cse.b2",
    "objectness.w", "objectness.b",
    "cls.W", "cls.b",
    "box.W", "box.b",
)
GROUPS = {
    "agnostic": ("agnostic.W",),
    "cse": ("cse.W1", "cse.b1", "cse.W2", "cse.b2", "objectness.w", "objectness.b"),
    "heads": ("cls.W", "cls.b", "box.W", "box.b"),
}
BIASES = frozenset({"cse.b1", "cse.b2", "objectness.b", "cls.b", "box.b"})
NEW_ROW_STD = 0.01
EXTRA_CHANNELS = 5  # alignment + 4 offsets appended to the latent feature


class TransferStrategy(str, Enum):
    FIX_ALL = "FIX_ALL"
    FIT_ALL = "FIT_ALL"
    FIT_CSE = "FIT_CSE"

    @property
    def trainable(self) -> frozenset[str]:
        groups = {
            TransferStrategy.FIX_ALL: ("heads",),
            TransferStrategy.FIT_ALL: ("agnostic", "cse", "heads"),
            TransferStrategy.FIT_CSE: ("cse", "heads"),
        }[self]
        return frozenset(p for g in groups for p in GROUPS[g])


# pre-training never touches the class-agnostic projection
PRETRAIN_TRAINABLE = frozenset(GROUPS["cse"] + GROUPS["heads"])


@dataclass
class DetectorState:
    params: dict[str, np.ndarray]
    classes: tuple[int, ...]
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def d_in(self) -> int:
        return self.params["agnostic.W"].shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(d_in, d_feat, hidden, d_obj)."""
        p = self.params
        return (p["agnostic.W"].shape[0], p["agnostic.W"].shape[1], p["cse.W1"].shape[1], p["cse.W2"].shape[1])

    def row(self, cls: int) -> int:
        return self.classes.index(cls) + 1

    def copy(self) -> "DetectorState":
        return DetectorState({k: v.copy() for k, v in self.params.items()}, self.classes, self.seed)

    def equals(self, other: "DetectorState") -> bool:
        return self.classes == other.classes and all(
            np.array_equal(self.params[k], other.params[k]) for k in PARAM_ORDER)


def init_detector(d_world: int, classes: Sequence[int], seed: int = 0,
                  d_feat: int = 32, hidden: int = 64, d_obj: int = 32) -> DetectorState:
    rng = substream(seed, "init")
    d_in = d_world + EXTRA_CHANNELS
    p = {
        "agnostic.W": rng.standard_normal((d_in, d_feat)) * (1.5 / np.sqrt(d_in)),
        "cse.W1": rng.standard_normal((d_feat, hidden)) / np.sqrt(d_feat),
        "cse.b1": np.zeros(hidden),
        "cse.W2": rng.standard_normal((hidden, d_obj)) / np.sqrt(hidden),
        "cse.b2": np.zeros(d_obj),
        "objectness.w": rng.standard_normal(d_obj) * 0.01,
        "objectness.b": np.zeros(1),
        "cls.W": rng.standard_normal((1, d_obj)) * NEW_ROW_STD,
        "cls.b": np.zeros(1),
        "box.W": rng.standard_normal((d_obj, 4)) * 0.01,
        "box.b": np.zeros(4),
    }
    state = DetectorState(p, (), seed)
    return register_classes(state, list(classes))


def register_classes(state: DetectorState, new_classes: Sequence[int]) -> DetectorState:
    """Append one classifier row per new class; existing rows are copied untouched."""
    new_classes = [int(c) for c in new_classes]
    if len(set(new_classes)) != len(new_classes) or set(new_classes) & set(state.classes):
        raise ValueError(f"classes already registered: {sorted(set(new_classes) & set(state.classes))}")
    out = state.copy()
    d_obj = state.params["cls.W"].shape[1]
    # one substream per class id so the rows do not depend on registration batching
    rows = [substream(state.seed, f"head-row-{c}").standard_normal(d_obj) * NEW_ROW_STD for c in new_classes]
    if rows:
        out.params["cls.W"] = np.vstack([state.params["cls.W"]] + [r[None] for r in rows])
        out.params["cls.b"] = np.concatenate([state.params["cls.b"], np.zeros(len(rows))])
    out.classes = state.classes + tuple(new_classes)
    return out


# ---------------------------------------------------------------------------
# region descriptors

def _encode(boxes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise (dx, dy, log dw, log dh) of every gt box relative to every box: (n, m, 4)."""
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    dx = ((gt[None, :, 0] + gt[None, :, 2]) - (boxes[:, None, 0] + boxes[:, None, 2])) / (2 * bw[:, None])
    dy = ((gt[None, :, 1] + gt[None, :, 3]) - (boxes[:, None, 1] + boxes[:, None, 3])) / (2 * bh[:, None])
    return np.stack([dx, dy, np.log(gw[None, :] / bw[:, None]), np.log(gh[None, :] / bh[:, None])], axis=2)


def region_descriptors(scene: Scene, boxes: np.ndarray) -> np.ndarray:
    """Pooled descriptor per box: [IoU-weighted mean latent feature, best IoU, IoU-weighted offsets].

    The last two parts stand in for what ROI pooling sees of the object's placement inside the
    box. Returns shape (n_boxes, d_world + 1 + 4); boxes touching no instance map to zeros.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    if not scene.instances:
        raise ValueError("scene has no instances; descriptor dimension is undefined")
    feats = np.stack([i.latent_feature for i in scene.instances])
    gt = np.array([i.box.as_tuple() for i in scene.instances])
    w = iou_matrix(boxes, gt)
    total = w.sum(axis=1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    pooled = (w @ feats) / safe
    offsets = np.einsum("nm,nmk->nk", w, _encode(boxes, gt)) / safe
    return np.hstack([pooled, w.max(axis=1, keepdims=True), offsets])


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class Forward:
    x: np.ndarray
    a: np.ndarray
    h: np.ndarray
    o: np.ndarray
    logits: np.ndarray
    objectness: np.ndarray
    deltas: np.ndarray


@dataclass
class RegionOutput:
    logits: np.ndarray
    objectness: float
    box_deltas: np.ndarray
    obj_feature: np.ndarray = field(repr=False)


def forward(state: DetectorState, x: np.ndarray) -> Forward:
    p = state.params
    a = np.tanh(x @ p["agnostic.W"])
    h = np.tanh(a @ p["cse.W1"] + p["cse.b1"])
    o = np.tanh(h @ p["cse.W2"] + p["cse.b2"])
    logits = o @ p["cls.W"].T + p["cls.b"]
    obj = o @ p["objectness.w"] + p["objectness.b"][0]
    deltas = o @ p["box.W"] + p["box.b"]
    return Forward(x, a, h, o, logits, obj, deltas)


def forward_region(state: DetectorState, scene: Scene, box: BoundingBox) -> RegionOutput:
    f = forward(state, region_descriptors(scene, [box.as_tuple()]))
    return RegionOutput(f.logits[0], float(f.objectness[0]), f.deltas[0], f.o[0])


def backward(state: DetectorState, fw: Forward, d_logits: np.ndarray, d_objectness: np.ndarray,
             d_deltas: np.ndarray, trainable: frozenset[str] | None = None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on the three heads.

    Parameters outside `trainable` get zero gradients (all are trainable when it is None).
    """
    p = state.params
    o, h, a, x = fw.o, fw.h, fw.a, fw.x
    g = {
        "cls.W": d_logits.T @ o,
        "cls.b": d_logits.sum(axis=0),
        "objectness.w": o.T @ d_objectness,
        "objectness.b": np.array([d_objectness.sum()]),
        "box.W": o.T @ d_deltas,
        "box.b": d_deltas.sum(axis=0),
    }
    d_o = d_logits @ p["cls.W"] + np.outer(d_objectness, p["objectness.w"]) + d_deltas @ p["box.W"].T
    d_u2 = d_o * (1 - o ** 2)
    g["cse.W2"] = h.T @ d_u2
    g["cse.b2"] = d_u2.sum(axis=0)
    d_u1 = (d_u2 @ p["cse.W2"].T) * (1 - h ** 2)
    g["cse.W1"] = a.T @ d_u1
    g["cse.b1"] = d_u1.sum(axis=0)
    if trainable is None or "agnostic.W" in trainable:
        d_pre = (d_u1 @ p["cse.W1"].T) * (1 - a ** 2)
        g["agnostic.W"] = x.T @ d_pre
    else:
        g["agnostic.W"] = np.zeros_like(p["agnostic.W"])
    if trainable is not None:
        for k in PARAM_ORDER:
            if k not in trainable:
                g[k] = np.zeros_like(p[k])
    return g


def backward_region(state: DetectorState, scene: Scene, box: BoundingBox, d_logits, d_objectness, d_deltas,
                    trainable: frozenset[str] | None = None) -> dict[str, np.ndarray]:
    fw = forward(state, region_descriptors(scene, [box.as_tuple()]))
    return backward(state, fw, np.atleast_2d(d_logits), np.atleast_1d(np.asarray(d_objectness, float)),
                    np.atleast_2d(d_deltas), trainable)
