"""Synthetic detection scenes whose classes are mixtures of Gaussian modes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    BoundingBox,
    DatasetSplit,
    Instance,
    Scene,
    Session,
    TaskMode,
    TaskSequence,
    iou_matrix,
    make_proposal,
    match_box,
    quantize,
)
from .rng import substream

TARGET_IOUS = (0.9, 0.8, 0.72, 0.68, 0.5, 0.3)
BACKGROUND_PER_SCENE = 4
GRID = 3  # scenes are a GRID x GRID lattice of object slots


@dataclass(frozen=True)
class WorldConfig:
    num_base_classes: int = 4
    num_novel_classes: int = 5
    modes_per_class: int = 3
    d_world: int = 16
    scenes_per_base_class: int = 40
    shots_K: int = 3
    instances_per_scene: tuple[int, int] = (1, 3)
    proposal_jitter: float = 0.01
    seed: int = 0
    feature_noise: float = 0.3
    mode_weights: tuple[float, ...] | None = None
    # when set, novel class k copies the modes of base class k % num_base shifted by a vector of this norm
    novel_offset: float | None = None
    test_scenes: int = 120
    extent: float = 100.0
    # base scenes may also hold novel-class objects, left unannotated
    novel_in_base: bool = True
    # mode frequencies of the test split; None means the training frequencies
    test_mode_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        lo, hi = self.instances_per_scene
        counts = (self.num_base_classes, self.num_novel_classes, self.d_world,
                  self.scenes_per_base_class, self.test_scenes)
        if min(counts) < 1 or self.shots_K < 1 or self.modes_per_class < 1:
            raise ValueError("counts, shots_K and modes_per_class must be positive")
        if not 1 <= lo <= hi:
            raise ValueError("instances_per_scene must be a range with 1 <= lo <= hi")
        if hi > GRID * GRID:
            raise ValueError(f"instances_per_scene {hi} exceeds scene capacity {GRID * GRID}")
        for w in (self.mode_weights, self.test_mode_weights):
            if w is not None and (len(w) != self.modes_per_class or min(w) < 0 or sum(w) <= 0):
                raise ValueError("mode weights need one non-negative entry per mode and a positive sum")
        if self.feature_noise < 0 or self.proposal_jitter < 0:
            raise ValueError("noise scales must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instances_per_scene"] = list(self.instances_per_scene)
        for k in ("mode_weights", "test_mode_weights"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "instances_per_scene" in d:
            d["instances_per_scene"] = tuple(d["instances_per_scene"])
        for k in ("mode_weights", "test_mode_weights"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class World:
    base: DatasetSplit
    sequence: TaskSequence
    test: DatasetSplit
    mode_means: np.ndarray = field(repr=False)  # (num classes, modes, d_world)

    @property
    def base_classes(self) -> tuple[int, ...]:
        return self.sequence.base_classes

    @property
    def novel_classes(self) -> tuple[int, ...]:
        return self.sequence.novel_classes


def _q(v):
    return np.array([quantize(x) for x in np.ravel(v)]).reshape(np.shape(v))


def _qbox(x0, y0, x1, y1) -> BoundingBox:
    return BoundingBox(quantize(x0), quantize(y0), quantize(x1), quantize(y1))


def _shifted(box: BoundingBox, target: float, extent: float, rng) -> BoundingBox | None:
    """A copy of `box` translated along one axis so its IoU with `box` is `target`."""
    axes = rng.permutation(4)
    for a in axes:
        horizontal = a < 2
        size = box.width if horizontal else box.height
        # overlap (s - d) / (s + d) = target along the shifted axis
        d = size * (1 - target) / (1 + target)
        sign = 1 if a % 2 == 0 else -1
        x0, y0, x1, y1 = box.as_tuple()
        if horizontal:
            x0, x1 = x0 + sign * d, x1 + sign * d
        else:
            y0, y1 = y0 + sign * d, y1 + sign * d
        if x0 >= 0 and y0 >= 0 and x1 <= extent and y1 <= extent:
            return _qbox(x0, y0, x1, y1)
    return None


def _background_box(gt: np.ndarray, extent: float, rng) -> BoundingBox:
    cell = extent / GRID
    for _ in range(1000):
        w, h = rng.uniform(0.3, 0.8, size=2) * cell
        x0 = rng.uniform(0, extent - w)
        y0 = rng.uniform(0, extent - h)
        b = _qbox(x0, y0, x0 + w, y0 + h)
        if len(gt) == 0 or iou_matrix(np.array([b.as_tuple()]), gt).max() < 0.3:
            return b
    raise RuntimeError("could not place a background proposal")


def _proposals(instances, cfg: WorldConfig, rng) -> tuple:
    boxes = []
    for inst in instances:
        for t in TARGET_IOUS:
            t_j = float(np.clip(t + cfg.proposal_jitter * rng.standard_normal(), 0.05, 0.99))
            b = _shifted(inst.box, t_j, cfg.extent, rng)
            if b is not None:
                boxes.append(b)
    gt = np.array([i.box.as_tuple() for i in instances]).reshape(-1, 4)
    boxes.extend(_background_box(gt, cfg.extent, rng) for _ in range(BACKGROUND_PER_SCENE))
    out = []
    for b in boxes:
        p = make_proposal(b, instances)
        out.append(type(p)(p.box, p.matched_gt, quantize(p.max_iou)) if p.max_iou > 0 else p)
    return tuple(out)


class _Builder:
    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.rng = substream(cfg.seed, "world")
        n_cls = cfg.num_base_classes + cfg.num_novel_classes
        means = self.rng.uniform(-1, 1, size=(n_cls, cfg.modes_per_class, cfg.d_world))
        if cfg.novel_offset is not None:
            nb = cfg.num_base_classes
            for k in range(cfg.num_novel_classes):
                v = self.rng.standard_normal(cfg.d_world)
                means[nb + k] = means[k % nb] + cfg.novel_offset * v / np.linalg.norm(v)
        self.means = _q(means)
        self.mode_p = self._probs(cfg.mode_weights)
        self.test_mode_p = self.mode_p if cfg.test_mode_weights is None else self._probs(cfg.test_mode_weights)
        self.next_id = 0

    def _probs(self, weights):
        w = np.ones(self.cfg.modes_per_class) if weights is None else np.asarray(weights, float)
        return w / w.sum()

    def latent(self, cls: int, mode: int) -> np.ndarray:
        f = self.means[cls, mode] + self.cfg.feature_noise * self.rng.standard_normal(self.cfg.d_world)
        return _q(f)

    def scene(self, classes: list[int], mode_p=None) -> Scene:
        """A scene with one instance per entry of `classes` in distinct grid slots."""
        cfg = self.cfg
        cell = cfg.extent / GRID
        slots = self.rng.choice(GRID * GRID, size=len(classes), replace=False)
        modes = {}
        instances = []
        for cls, slot in zip(classes, slots):
            # instances of one class in one scene share a mode
            if cls not in modes:
                modes[cls] = int(self.rng.choice(cfg.modes_per_class, p=self.mode_p if mode_p is None else mode_p))
            r, c = divmod(int(slot), GRID)
            w, h = self.rng.uniform(0.45, 0.8, size=2) * cell
            x0 = c * cell + self.rng.uniform(0, cell - w)
            y0 = r * cell + self.rng.uniform(0, cell - h)
            instances.append(Instance(_qbox(x0, y0, x0 + w, y0 + h), cls, self.latent(cls, modes[cls])))
        instances = tuple(instances)
        sid = self.next_id
        self.next_id += 1
        return Scene(sid, instances, _proposals(instances, cfg, self.rng), cfg.extent)

    def mixed_scene(self, primary: int, pool: list[int], mode_p=None) -> Scene:
        lo, hi = self.cfg.instances_per_scene
        n_inst = int(self.rng.integers(lo, hi + 1))
        n_cls = int(self.rng.integers(1, min(3, n_inst, len(pool)) + 1))
        others = [c for c in pool if c != primary]
        chosen = [primary] + [int(c) for c in self.rng.choice(others, size=n_cls - 1, replace=False)]
        labels = chosen + [int(c) for c in self.rng.choice(chosen, size=n_inst - n_cls)]
        return self.scene(labels, mode_p)


def generate_world(cfg: WorldConfig) -> World:
    """Base split, K-shot novel task sequence (typical mode) and a held-out test split."""
    b = _Builder(cfg)
    base_cls = list(range(cfg.num_base_classes))
    novel_cls = list(range(cfg.num_base_classes, cfg.num_base_classes + cfg.num_novel_classes))

    base_scenes = []
    for i in range(cfg.scenes_per_base_class * cfg.num_base_classes):
        pool = base_cls + novel_cls if cfg.novel_in_base else base_cls
        base_scenes.append(b.mixed_scene(base_cls[i % len(base_cls)], pool))
    base = DatasetSplit(tuple(base_scenes), frozenset(base_cls))

    sessions = []
    lo, hi = cfg.instances_per_scene
    for c in novel_cls:
        # one annotated novel instance per shot scene; any base objects alongside stay unannotated
        shots = []
        for _ in range(cfg.shots_K):
            n_other = int(b.rng.integers(lo, hi + 1)) - 1
            n_cls = min(n_other, int(b.rng.integers(0, 3)))
            pool = [int(x) for x in b.rng.choice(base_cls, size=n_cls, replace=False)] if n_cls else []
            others = pool + [int(x) for x in b.rng.choice(pool, size=n_other - n_cls)] if pool else []
            shots.append(b.scene([c] + others))
        shots = tuple(shots)
        sessions.append(Session((c,), DatasetSplit(shots, frozenset([c]))))
    seq = TaskSequence(TaskMode.CONTINUAL, tuple(sessions), tuple(base_cls)).as_mode(TaskMode.TYPICAL)

    all_cls = base_cls + novel_cls
    test = tuple(b.mixed_scene(all_cls[i % len(all_cls)], all_cls, b.test_mode_p) for i in range(cfg.test_scenes))
    return World(base, seq, DatasetSplit(test, frozenset(all_cls)), b.means)


def proposal_inconsistencies(split: DatasetSplit, tol: float = 1e-8) -> list[str]:
    """Proposals whose stored match disagrees with a fresh IoU computation."""
    bad = []
    for scene in split.scenes:
        for j, p in enumerate(scene.proposals):
            idx, v = match_box(p.box, scene.instances)
            if idx != p.matched_gt or abs(v - p.max_iou) > tol:
                bad.append(f"scene {scene.scene_id} proposal {j}: stored ({p.matched_gt}, {p.max_iou}), "
                           f"recomputed ({idx}, {v})")
    return bad
