"""Domain types shared across the package: boxes, instances, proposals,
scenes, splits and task sequences, plus the line-delimited scene format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# all reals that cross a file boundary are quantized to this many digits
SIG_DIGITS = 9


def quantize(x: float) -> float:
    return float(f"{x:.{SIG_DIGITS}g}")


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def within(self, extent: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= extent and self.y_max <= extent


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two axis-aligned boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(1.0, inter / union)


def harmonic_mean(x: float, y: float) -> float:
    if x + y == 0:
        return 0.0
    return 2.0 * x * y / (x + y)


@dataclass(frozen=True)
class Instance:
    box: BoundingBox
    cls: int
    latent_feature: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Instance)
            and self.box == other.box
            and self.cls == other.cls
            and np.array_equal(self.latent_feature, other.latent_feature)
        )


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    matched_gt: int | None
    max_iou: float

    def __post_init__(self):
        if (self.matched_gt is not None) != (self.max_iou > 0):
            raise ValueError("matched_gt must be present iff max_iou > 0")


def match_box(box: BoundingBox, instances: Sequence[Instance]) -> tuple[int | None, float]:
    """Index and IoU of the best-overlapping instance; ties go to the lower index."""
    best, best_iou = None, 0.0
    for i, inst in enumerate(instances):
        v = iou(box, inst.box)
        if v > best_iou:
            best, best_iou = i, v
    return best, best_iou


def make_proposal(box: BoundingBox, instances: Sequence[Instance]) -> Proposal:
    idx, v = match_box(box, instances)
    return Proposal(box, idx, v)


@dataclass(frozen=True)
class Scene:
    scene_id: int
    instances: tuple[Instance, ...]
    proposals: tuple[Proposal, ...]
    extent: float

    @property
    def classes(self) -> list[int]:
        return sorted({inst.cls for inst in self.instances})


@dataclass(frozen=True)
class DatasetSplit:
    """Scenes plus the classes whose annotations are exposed.

    `scene_visible` narrows the exposed classes for individual scenes; it appears when splits
    with different visibility are merged (e.g. base exemplars plus novel shots).
    """
    scenes: tuple[Scene, ...]
    visible_classes: frozenset[int]
    scene_visible: dict[int, frozenset[int]] | None = None

    def __post_init__(self):
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ValueError("scene ids must be unique within a split")

    def visible_for(self, scene: Scene) -> frozenset[int]:
        if self.scene_visible is not None and scene.scene_id in self.scene_visible:
            return self.scene_visible[scene.scene_id]
        return self.visible_classes

    def annotations(self) -> Iterable[tuple[Scene, int, Instance]]:
        for scene in self.scenes:
            vis = self.visible_for(scene)
            for i, inst in enumerate(scene.instances):
                if inst.cls in vis:
                    yield scene, i, inst

    def by_id(self) -> dict[int, Scene]:
        return {s.scene_id: s for s in self.scenes}


def merge_splits(*splits: DatasetSplit | None) -> DatasetSplit:
    """Concatenate splits, keeping each scene's own annotation visibility."""
    scenes, per_scene, union = [], {}, set()
    for sp in splits:
        if sp is None:
            continue
        for s in sp.scenes:
            scenes.append(s)
            per_scene[s.scene_id] = sp.visible_for(s)
        union |= sp.visible_classes
    union = frozenset(union)
    overrides = {k: v for k, v in per_scene.items() if v != union}
    return DatasetSplit(tuple(scenes), union, overrides or None)


def reorder(split: DatasetSplit, order) -> DatasetSplit:
    return DatasetSplit(tuple(split.scenes[i] for i in order), split.visible_classes, split.scene_visible)


class TaskMode(str, Enum):
    TYPICAL = "typical"
    CONTINUAL = "continual"


@dataclass(frozen=True)
class Session:
    new_classes: tuple[int, ...]
    shots: DatasetSplit


@dataclass(frozen=True)
class TaskSequence:
    mode: TaskMode
    sessions: tuple[Session, ...]
    base_classes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        seen = set(self.base_classes)
        for s in self.sessions:
            new = set(s.new_classes)
            if new & seen:
                raise ValueError("session classes must be disjoint from earlier classes")
            seen |= new
        if self.mode is TaskMode.CONTINUAL and any(len(s.new_classes) != 1 for s in self.sessions):
            raise ValueError("continual sessions register exactly one class each")
        if self.mode is TaskMode.TYPICAL and len(self.sessions) != 1:
            raise ValueError("typical mode has exactly one session")

    @property
    def novel_classes(self) -> tuple[int, ...]:
        return tuple(c for s in self.sessions for c in s.new_classes)

    def as_mode(self, mode: TaskMode) -> "TaskSequence":
        """Regroup the same shots into the other protocol."""
        if mode is self.mode:
            return self
        if mode is TaskMode.TYPICAL:
            scenes = tuple(sc for s in self.sessions for sc in s.shots.scenes)
            vis = frozenset(self.novel_classes)
            return TaskSequence(mode, (Session(self.novel_classes, DatasetSplit(scenes, vis)),), self.base_classes)
        sessions = []
        for s in self.sessions:
            for c in s.new_classes:
                scenes = tuple(sc for sc in s.shots.scenes if c in sc.classes)
                sessions.append(Session((c,), DatasetSplit(scenes, frozenset([c]))))
        return TaskSequence(mode, tuple(sessions), self.base_classes)


# ---------------------------------------------------------------------------
# line-delimited scene format

def _fmt(x: float) -> str:
    return f"{x:.{SIG_DIGITS}g}"


def scene_to_line(scene: Scene) -> str:
    # fixed field order: id, extent, instances, proposals
    inst = ",".join(
        '{"box":[%s],"class":%d,"feature":[%s]}'
        % (",".join(_fmt(v) for v in i.box.as_tuple()), i.cls, ",".join(_fmt(v) for v in i.latent_feature))
        for i in scene.instances
    )
    props = ",".join(
        '{"box":[%s],"matched_gt":%s,"max_iou":%s}'
        % (
            ",".join(_fmt(v) for v in p.box.as_tuple()),
            "null" if p.matched_gt is None else str(p.matched_gt),
            _fmt(p.max_iou),
        )
        for p in scene.proposals
    )
    return '{"id":%d,"extent":%s,"instances":[%s],"proposals":[%s]}' % (
        scene.scene_id, _fmt(scene.extent), inst, props)


def scene_from_line(line: str) -> Scene:
    d = json.loads(line)
    instances = tuple(
        Instance(BoundingBox(*i["box"]), int(i["class"]), np.asarray(i["feature"], dtype=float))
        for i in d["instances"]
    )
    proposals = tuple(Proposal(BoundingBox(*p["box"]), p["matched_gt"], float(p["max_iou"])) for p in d["proposals"])
    return Scene(int(d["id"]), instances, proposals, float(d["extent"]))


def split_to_text(split: DatasetSplit) -> str:
    head = {"visible_classes": sorted(split.visible_classes)}
    if split.scene_visible:
        head["scene_visible"] = {str(k): sorted(v) for k, v in sorted(split.scene_visible.items())}
    header = json.dumps(head)
    return "\n".join([header] + [scene_to_line(s) for s in split.scenes]) + "\n"


def split_from_text(text: str) -> DatasetSplit:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = json.loads(lines[0])
    sv = header.get("scene_visible")
    sv = {int(k): frozenset(v) for k, v in sv.items()} if sv else None
    return DatasetSplit(tuple(scene_from_line(ln) for ln in lines[1:]), frozenset(header["visible_classes"]), sv)


def save_split(split: DatasetSplit, path: str | Path) -> None:
    Path(path).write_text(split_to_text(split))


def load_split(path: str | Path) -> DatasetSplit:
    return split_from_text(Path(path).read_text())


def sequence_to_text(seq: TaskSequence) -> str:
    out = [json.dumps({"mode": seq.mode.value, "base_classes": list(seq.base_classes),
                       "sessions": len(seq.sessions)})]
    for s in seq.sessions:
        out.append(json.dumps({"session_classes": list(s.new_classes), "scenes": len(s.shots.scenes)}))
        out.append(split_to_text(s.shots).rstrip("\n"))
    return "\n".join(out) + "\n"


def sequence_from_text(text: str) -> TaskSequence:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = json.loads(lines[0])
    pos = 1
    sessions = []
    for _ in range(head["sessions"]):
        meta = json.loads(lines[pos])
        n = meta["scenes"]
        shots = split_from_text("\n".join(lines[pos + 1: pos + 2 + n]))
        sessions.append(Session(tuple(meta["session_classes"]), shots))
        pos += 2 + n
    return TaskSequence(TaskMode(head["mode"]), tuple(sessions), tuple(head["base_classes"]))
