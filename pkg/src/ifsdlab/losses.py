"""Training objectives: classification, objectness, box regression and the
pre-computed knowledge-distillation term, plus the region batches they run on."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import DatasetSplit, Proposal, Scene, iou_matrix
from .detector import DetectorState, backward, forward, region_descriptors

BG_IOU_OBJECTNESS = 0.3   # objectness negatives: max IoU below this
BG_IOU_CLS = 0.5          # classification negatives: max IoU below this
BG_PER_POSITIVE = 3


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.7
    temperature: float = 20.0
    loc_weight: float = 1.0
    rpn_weight: float = 1.0
    distill_background: bool = True
    # normalise the current distillation softmax over the old block only, or over every current class
    distill_over_all: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def scaled_softmax(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=float) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_scaled_softmax(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=float) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def select_positive_regions(scene: Scene, alpha: float) -> list[tuple[Proposal, int]]:
    """Proposals whose best IoU with a ground truth strictly exceeds `alpha`, with that ground truth's index."""
    return [(p, p.matched_gt) for p in scene.proposals if p.max_iou > alpha]


# ---------------------------------------------------------------------------
# distillation targets

@dataclass
class DistillTargetStore:
    targets: dict[tuple[int, int], np.ndarray]
    temperature: float
    old_classes: tuple[int, ...]
    include_background: bool = True

    @property
    def width(self) -> int:
        return len(self.old_classes) + int(self.include_background)

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        try:
            return self.targets[key]
        except KeyError:
            raise KeyError(f"no distillation target for scene/instance {key}; store does not match session") from None

    def __contains__(self, key):
        return key in self.targets


def old_block(logits: np.ndarray, num_old: int, include_background: bool = True) -> np.ndarray:
    """Columns of the classifier output that belong to the old classes (and background)."""
    lo = 0 if include_background else 1
    return logits[..., lo: num_old + 1]


def precompute_distill_targets(old: DetectorState, split: DatasetSplit | Iterable[Scene], T: float,
                               include_background: bool = True,
                               visible: Iterable[int] | None = None) -> DistillTargetStore:
    """Old-model scaled-softmax distributions at every visible ground-truth box.

    Only these vectors survive; nothing in the store references `old`.
    """
    if isinstance(split, DatasetSplit):
        scenes = split.scenes
        vis_of = (lambda s: split.visible_for(s)) if visible is None else (lambda s, v=frozenset(visible): v)
    else:
        scenes = tuple(split)
        vis_of = lambda s, v=(None if visible is None else frozenset(visible)): v
    n_old = old.num_classes
    targets = {}
    for scene in scenes:
        vis = vis_of(scene)
        idx = [i for i, inst in enumerate(scene.instances) if vis is None or inst.cls in vis]
        if not idx:
            continue
        boxes = np.array([scene.instances[i].box.as_tuple() for i in idx])
        logits = forward(old, region_descriptors(scene, boxes)).logits
        probs = scaled_softmax(old_block(logits, n_old, include_background), T)
        for i, p in zip(idx, probs):
            targets[(scene.scene_id, i)] = p
    return DistillTargetStore(targets, T, old.classes, include_background)


# ---------------------------------------------------------------------------
# loss terms; each returns (value, gradient w.r.t. its input)

def classification_loss(logits: np.ndarray, labels: np.ndarray, return_grad: bool = False):
    """Mean negative log softmax probability of the label row (row 0 is background)."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if n == 0:
        return (0.0, np.zeros_like(logits)) if return_grad else 0.0
    logp = log_scaled_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    if not return_grad:
        return float(loss)
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1
    return float(loss), g / n


def distillation_loss(logits: np.ndarray, targets: np.ndarray, T: float, num_old: int,
                      include_background: bool = True, over_all: bool = False, return_grad: bool = False):
    """Mean cross-entropy between stored old distributions and the current scaled softmax.

    The current softmax is normalised over the old block, or over all current rows when
    `over_all` is set (only old-block entries enter the sum either way).
    """
    logits = np.atleast_2d(logits)
    targets = np.atleast_2d(targets)
    n = len(targets)
    if n == 0:
        return (0.0, np.zeros_like(logits)) if return_grad else 0.0
    lo = 0 if include_background else 1
    hi = num_old + 1
    if targets.shape[1] != hi - lo:
        raise ValueError(f"target width {targets.shape[1]} does not match old block width {hi - lo}")
    if over_all:
        support = logits if include_background else logits[:, 1:]
        off = 0 if include_background else 1
    else:
        support, off = logits[:, lo:hi], lo
    logp = log_scaled_softmax(support, T)
    block = logp[:, lo - off: hi - off]
    loss = -(targets * block).sum(axis=1).mean()
    if not return_grad:
        return float(loss)
    # d/dz of -sum_i q_i log p_i with p = softmax(z / T): (p * sum(q) - q) / T
    g_support = np.exp(logp) * targets.sum(axis=1, keepdims=True)
    g_support[:, lo - off: hi - off] -= targets
    g = np.zeros_like(logits)
    g[:, off: off + support.shape[1]] = g_support / (T * n)
    return float(loss), g


def smooth_l1(r: np.ndarray) -> np.ndarray:
    a = np.abs(r)
    return np.where(a < 1, 0.5 * r ** 2, a - 0.5)


def box_deltas(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Standard (dx, dy, log dw, log dh) encoding of `targets` relative to `proposals`."""
    p = np.atleast_2d(proposals).astype(float)
    t = np.atleast_2d(targets).astype(float)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    return np.stack([
        ((t[:, 0] + t[:, 2]) - (p[:, 0] + p[:, 2])) / (2 * pw),
        ((t[:, 1] + t[:, 3]) - (p[:, 1] + p[:, 3])) / (2 * ph),
        np.log(tw / pw),
        np.log(th / ph),
    ], axis=1)


def apply_deltas(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(proposals).astype(float)
    d = np.atleast_2d(deltas)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = (p[:, 0] + p[:, 2]) / 2 + d[:, 0] * pw
    cy = (p[:, 1] + p[:, 3]) / 2 + d[:, 1] * ph
    # exp clamp mirrors the usual log(1000/16) guard
    w = pw * np.exp(np.minimum(d[:, 2], 4.135))
    h = ph * np.exp(np.minimum(d[:, 3], 4.135))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def localization_loss(pred: np.ndarray, target: np.ndarray, return_grad: bool = False):
    """Smooth-L1 summed over the four deltas, averaged over positive regions."""
    pred = np.atleast_2d(pred)
    n = len(pred)
    if n == 0:
        return (0.0, np.zeros_like(pred)) if return_grad else 0.0
    r = pred - np.atleast_2d(target)
    loss = smooth_l1(r).sum(axis=1).mean()
    if not return_grad:
        return float(loss)
    return float(loss), np.clip(r, -1, 1) / n


def objectness_loss(scores: np.ndarray, labels: np.ndarray, return_grad: bool = False):
    """Binary cross-entropy with logits, averaged over labelled regions."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = len(s)
    if n == 0:
        return (0.0, np.zeros_like(s)) if return_grad else 0.0
    loss = (np.logaddexp(0, s) - y * s).mean()
    if not return_grad:
        return float(loss)
    return float(loss), (1 / (1 + np.exp(-s)) - y) / n


@dataclass
class LossComponents:
    rpn: float
    loc: float
    cls: float
    kd: float | None = None


def total_loss(c: LossComponents, T: float, loc_weight: float = 1.0, rpn_weight: float = 1.0) -> float:
    total = rpn_weight * c.rpn + loc_weight * c.loc + c.cls
    if c.kd is not None:
        total += T ** 2 * c.kd
    return total


# ---------------------------------------------------------------------------
# region batches

@dataclass
class SceneRegions:
    """Every candidate region of one scene (proposals plus ground-truth boxes)."""
    scene_id: int
    boxes: np.ndarray        # (n, 4)
    x: np.ndarray            # (n, d_in) descriptors
    max_iou: np.ndarray      # (n,)
    matched: np.ndarray      # (n,) instance index, -1 if none
    matched_cls: np.ndarray  # (n,) class id, -1 if none
    gt_boxes: np.ndarray     # (n_inst, 4)


def scene_regions(scene: Scene, visible: Iterable[int] | None = None) -> SceneRegions:
    """Regions labelled against the annotated instances only.

    Instances of classes outside `visible` are still in the scene (descriptors see them) but
    contribute no ground-truth region and no match, so regions on them look like background.
    """
    vis = [i for i, inst in enumerate(scene.instances) if visible is None or inst.cls in visible]
    props = [p.box.as_tuple() for p in scene.proposals]
    all_gt = np.array([i.box.as_tuple() for i in scene.instances], dtype=float).reshape(-1, 4)
    gts = all_gt[vis]
    boxes = np.vstack([np.array(props, dtype=float).reshape(-1, 4), gts])
    if len(vis) == len(scene.instances):
        matched = [(-1 if p.matched_gt is None else p.matched_gt) for p in scene.proposals]
        max_iou = [p.max_iou for p in scene.proposals]
    elif vis:
        ious = np.array([[p.max_iou if p.matched_gt == j else 0.0 for j in vis] for p in scene.proposals])
        # recompute overlaps with the annotated subset; argmax keeps the lower-index tie rule
        ious = np.maximum(ious, iou_matrix(np.array(props).reshape(-1, 4), gts))
        best = ious.argmax(axis=1)
        max_iou = list(ious[np.arange(len(props)), best])
        matched = [vis[b] if v > 0 else -1 for b, v in zip(best, max_iou)]
    else:
        matched, max_iou = [-1] * len(props), [0.0] * len(props)
    matched = np.array(list(matched) + vis, dtype=int)
    max_iou = np.array(list(max_iou) + [1.0] * len(vis))
    cls = np.array([scene.instances[m].cls if m >= 0 else -1 for m in matched], dtype=int)
    return SceneRegions(scene.scene_id, boxes, region_descriptors(scene, boxes), max_iou, matched, cls, all_gt)


@dataclass
class RegionBatch:
    x: np.ndarray
    boxes: np.ndarray
    cls_idx: np.ndarray          # regions entering the classification loss
    cls_labels: np.ndarray       # classifier rows for cls_idx
    pos_idx: np.ndarray          # positive regions (X_p)
    loc_targets: np.ndarray      # (len(pos_idx), 4)
    kd_targets: np.ndarray | None  # (len(pos_idx), width) or None
    obj_idx: np.ndarray
    obj_labels: np.ndarray
    pos_keys: list = field(default_factory=list)


def build_batch(regions: Sequence[SceneRegions], state: DetectorState, cfg: LossConfig,
                rng: np.random.Generator, store: DistillTargetStore | None = None) -> RegionBatch:
    """Label and sample regions of a few scenes for one optimisation step."""
    xs, boxes, cls_idx, cls_lab, pos_idx, loc_t, kd_t, obj_idx, obj_lab, keys = ([] for _ in range(10))
    off = 0
    for r in regions:
        pos = np.flatnonzero((r.max_iou > cfg.alpha) & (r.matched >= 0))
        bg_cls = np.flatnonzero(r.max_iou < BG_IOU_CLS)
        bg_obj = np.flatnonzero(r.max_iou < BG_IOU_OBJECTNESS)
        n_bg = min(len(bg_cls), BG_PER_POSITIVE * max(len(pos), 1))
        bg_pick = np.sort(rng.choice(bg_cls, size=n_bg, replace=False)) if n_bg else bg_cls[:0]
        xs.append(r.x)
        boxes.append(r.boxes)
        cls_idx.extend(off + pos)
        cls_lab.extend(state.row(int(c)) for c in r.matched_cls[pos])
        cls_idx.extend(off + bg_pick)
        cls_lab.extend([0] * len(bg_pick))
        pos_idx.extend(off + pos)
        loc_t.append(box_deltas(r.boxes[pos], r.gt_boxes[r.matched[pos]]) if len(pos) else np.zeros((0, 4)))
        obj_idx.extend(off + pos)
        obj_lab.extend([1.0] * len(pos))
        obj_idx.extend(off + bg_obj)
        obj_lab.extend([0.0] * len(bg_obj))
        for i in pos:
            key = (r.scene_id, int(r.matched[i]))
            keys.append(key)
            if store is not None:
                kd_t.append(store[key])
        off += len(r.x)
    width = store.width if store is not None else 0
    return RegionBatch(
        x=np.vstack(xs), boxes=np.vstack(boxes),
        cls_idx=np.array(cls_idx, dtype=int), cls_labels=np.array(cls_lab, dtype=int),
        pos_idx=np.array(pos_idx, dtype=int),
        loc_targets=np.vstack(loc_t) if loc_t else np.zeros((0, 4)),
        kd_targets=(np.array(kd_t).reshape(-1, width) if store is not None else None),
        obj_idx=np.array(obj_idx, dtype=int), obj_labels=np.array(obj_lab),
        pos_keys=keys,
    )


def batch_loss(state: DetectorState, batch: RegionBatch, cfg: LossConfig, num_old: int | None = None,
               trainable: frozenset[str] | None = None, with_grad: bool = True):
    """Components of the total objective on `batch`, and parameter gradients of the total.

    `num_old` is the size of the old class set the stored targets cover; the distillation term is
    skipped when the batch carries no targets.
    """
    fw = forward(state, batch.x)
    n = len(batch.x)
    d_logits = np.zeros_like(fw.logits)
    d_obj = np.zeros(n)
    d_deltas = np.zeros((n, 4))

    l_cls, g = classification_loss(fw.logits[batch.cls_idx], batch.cls_labels, return_grad=True)
    np.add.at(d_logits, batch.cls_idx, g)

    l_rpn, g = objectness_loss(fw.objectness[batch.obj_idx], batch.obj_labels, return_grad=True)
    np.add.at(d_obj, batch.obj_idx, cfg.rpn_weight * g)

    l_loc, g = localization_loss(fw.deltas[batch.pos_idx], batch.loc_targets, return_grad=True)
    np.add.at(d_deltas, batch.pos_idx, cfg.loc_weight * g)

    l_kd = None
    if batch.kd_targets is not None:
        if num_old is None:
            raise ValueError("num_old is required when distilling")
        l_kd, g = distillation_loss(fw.logits[batch.pos_idx], batch.kd_targets, cfg.temperature, num_old,
                                    cfg.distill_background, cfg.distill_over_all, return_grad=True)
        np.add.at(d_logits, batch.pos_idx, cfg.temperature ** 2 * g)

    comps = LossComponents(l_rpn, l_loc, l_cls, l_kd)
    if not with_grad:
        return comps, None
    return comps, backward(state, fw, d_logits, d_obj, d_deltas, trainable)
