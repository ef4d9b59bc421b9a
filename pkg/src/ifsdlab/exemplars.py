"""Exemplar selection over base-class scenes: cluster-coverage greedy search,
uniform random sampling, and class-mean herding."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Scene
from .detector import DetectorState, forward, region_descriptors
from .rng import substream

log = logging.getLogger(__name__)

KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class ImageClassFeature:
    scene_id: int
    cls: int
    feature: np.ndarray


@dataclass
class ExemplarSet:
    scenes: list[int]
    covered: set[tuple[int, int]] = field(default_factory=set)
    method: str = "clustering"
    seed: int | None = None
    uncovered: set[tuple[int, int]] = field(default_factory=set)

    def __len__(self):
        return len(self.scenes)

    def to_text(self) -> str:
        return json.dumps({
            "method": self.method,
            "seed": self.seed,
            "scenes": self.scenes,
            "covered": sorted([list(p) for p in self.covered]),
            "uncovered": sorted([list(p) for p in self.uncovered]),
        }, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExemplarSet":
        d = json.loads(text)
        return cls([int(s) for s in d["scenes"]], {tuple(p) for p in d["covered"]}, d["method"], d["seed"],
                   {tuple(p) for p in d.get("uncovered", [])})


FEATURE_LAYERS = {"object": "o", "hidden": "h", "agnostic": "a"}


def extract_image_class_features(state: DetectorState, scenes: Sequence[Scene],
                                 classes: Sequence[int] | None = None, layer: str = "object") -> list[ImageClassFeature]:
    """Per (scene, class) mean of a network feature at that class's ground-truth boxes.

    `layer` picks the tap: "object" (CSE output, the default), "hidden" or "agnostic".
    """
    if layer not in FEATURE_LAYERS:
        raise ValueError(f"unknown feature layer {layer!r}; choose from {sorted(FEATURE_LAYERS)}")
    keep = None if classes is None else set(classes)
    out = []
    for scene in scenes:
        insts = [i for i in scene.instances if keep is None or i.cls in keep]
        if not insts:
            continue
        boxes = np.array([i.box.as_tuple() for i in insts])
        feats = getattr(forward(state, region_descriptors(scene, boxes)), FEATURE_LAYERS[layer])
        labels = np.array([i.cls for i in insts])
        for c in sorted(set(labels.tolist())):
            out.append(ImageClassFeature(scene.scene_id, c, feats[labels == c].mean(axis=0)))
    return out


def kmeans(features: np.ndarray, k: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from k-means++ seeding.

    Returns ``(centroids, assignment)``. With fewer points than `k`, the points themselves
    are the centroids, padded with copies of the last one.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("kmeans needs at least one feature vector")
    n = len(X)
    if n <= k:
        C = np.vstack([X, np.repeat(X[-1:], k - n, axis=0)])
        return C, nearest(X, C)
    rng = substream(seed, "kmeans")
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    C = X[centers].copy()
    assign = nearest(X, C)
    for _ in range(KMEANS_MAX_ITER):
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
        new = nearest(X, C)
        if np.array_equal(new, assign):
            break
        assign = new
    return C, assign


def nearest(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per row; ties go to the lower index."""
    d = ((np.asarray(X)[:, None, :] - np.asarray(C)[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def inertia(X: np.ndarray, C: np.ndarray, assign: np.ndarray) -> float:
    return float(((np.asarray(X) - np.asarray(C)[assign]) ** 2).sum())


def class_centroids(features: Sequence[ImageClassFeature], classes: Sequence[int], k: int,
                    seed: int = 0) -> dict[int, np.ndarray]:
    out = {}
    for c in classes:
        X = np.array([f.feature for f in features if f.cls == c])
        if len(X) == 0:
            continue
        out[c], _ = kmeans(X, k, seed=seed + 7919 * c)
    return out


def assignments(features: Sequence[ImageClassFeature],
                centroids: dict[int, np.ndarray]) -> dict[int, dict[int, tuple[int, float]]]:
    """scene_id -> {class: (nearest cluster, distance)}."""
    out: dict[int, dict[int, tuple[int, float]]] = {}
    for f in features:
        if f.cls not in centroids:
            continue
        d = np.linalg.norm(centroids[f.cls] - f.feature, axis=1)
        q = int(d.argmin())
        out.setdefault(f.scene_id, {})[f.cls] = (q, float(d[q]))
    return out


def select_exemplars_clustering(features: Sequence[ImageClassFeature], centroids: dict[int, np.ndarray],
                                k: int, scene_ids: Sequence[int] | None = None) -> ExemplarSet:
    """Greedy cluster-coverage selection.

    Each step takes, among scenes none of whose (class, cluster) pairs is covered yet, the scene
    whose class features sit closest (on average) to their assigned centroids. Stops once every
    pair is covered or no eligible scene remains.
    """
    q = assignments(features, centroids)
    if scene_ids is not None:
        q = {s: v for s, v in q.items() if s in set(scene_ids)}
    # duplicated centroids (classes with fewer than k scenes) never win an assignment
    all_pairs = {(c, j) for c, C in centroids.items() for j in range(len(C))
                 if not any(np.array_equal(C[j], C[i]) for i in range(j))}
    target = len(all_pairs)
    covered: set[tuple[int, int]] = set()
    chosen: list[int] = []
    while len(covered) != target:
        best, best_cost = None, np.inf
        for sid in sorted(q):
            pairs = {(c, j) for c, (j, _) in q[sid].items()}
            if pairs & covered:
                continue
            cost = np.mean([d for _, d in q[sid].values()])
            if cost < best_cost:
                best, best_cost = sid, cost
        if best is None:
            break
        covered |= {(c, j) for c, (j, _) in q[best].items()}
        chosen.append(best)
    missing = all_pairs - covered
    if missing:
        log.info("clustering selection stopped with %d uncovered (class, cluster) pairs", len(missing))
    return ExemplarSet(chosen, covered, "clustering", None, missing)


def select_exemplars_random(scene_ids: Sequence[int], count: int, seed: int = 0) -> ExemplarSet:
    ids = list(scene_ids)
    if count > len(ids):
        log.warning("requested %d exemplars from %d scenes; clamping", count, len(ids))
        count = len(ids)
    rng = substream(seed, "exemplars-random")
    pick = rng.choice(len(ids), size=count, replace=False)
    return ExemplarSet([ids[i] for i in pick], set(), "random", seed)


def select_exemplars_classmean(features: Sequence[ImageClassFeature], classes: Sequence[int], k: int) -> ExemplarSet:
    """Herding per class: grow a set of `k` scenes whose running mean tracks the class mean."""
    chosen: list[int] = []
    for c in classes:
        fs = sorted((f for f in features if f.cls == c), key=lambda f: f.scene_id)
        if not fs:
            continue
        X = np.array([f.feature for f in fs])
        mu = X.mean(axis=0)
        acc = np.zeros_like(mu)
        taken: list[int] = []
        for step in range(min(k, len(fs))):
            err = np.linalg.norm(mu - (acc + X) / (step + 1), axis=1)
            err[taken] = np.inf
            i = int(err.argmin())
            taken.append(i)
            acc += X[i]
        for i in taken:
            if fs[i].scene_id not in chosen:
                chosen.append(fs[i].scene_id)
    return ExemplarSet(chosen, set(), "classmean", None)
