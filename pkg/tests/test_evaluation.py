import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifsdlab.core import BoundingBox, DatasetSplit, harmonic_mean
from ifsdlab.detector import init_detector
from ifsdlab.evaluation import (
    IOU_THRESHOLDS,
    MAX_DETECTIONS,
    Detection,
    EvalReport,
    average_precision,
    average_recall,
    evaluate,
    greedy_match,
    infer,
    nms,
    top_k,
)

from conftest import make_scene
from oracles import box_iou, exhaustive_match


def random_box(rng, extent=20.0):
    x, y = rng.uniform(0, extent, size=2)
    w, h = rng.uniform(2, 8, size=2)
    return (x, y, x + w, y + h)


def jitter(rng, box, scale):
    return tuple(v + rng.normal(0, scale) for v in box)


def random_scene_boxes(rng):
    gts = [random_box(rng) for _ in range(int(rng.integers(0, 5)))]
    dets = []
    for _ in range(int(rng.integers(0, 7))):
        if gts and rng.random() < 0.7:
            dets.append(jitter(rng, gts[int(rng.integers(len(gts)))], rng.uniform(0.05, 1.5)))
        else:
            dets.append(random_box(rng))
    dets = [(min(b[0], b[2] - 0.5), min(b[1], b[3] - 0.5), b[2], b[3]) for b in dets]
    return gts, dets


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_greedy_matches_exhaustive_assignment(seed):
    gts, dets = random_scene_boxes(np.random.default_rng(seed))
    for thr in IOU_THRESHOLDS:
        got = greedy_match(np.array(dets), np.array(gts), thr)
        want = exhaustive_match(dets, gts, thr) if dets else []
        if not gts:
            want = [-1] * len(dets)
        assert list(got) == list(want)
        assert int((got >= 0).sum()) == sum(1 for a in want if a >= 0)


def oracle_ap(dets, gts, thr):
    """Plain AP at one threshold from oracle matches; dets is a list of (score, box)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
    boxes = [dets[i][1] for i in order]
    match = exhaustive_match(boxes, gts, thr) if boxes else []
    tp = [1 if m >= 0 else 0 for m in match]
    if not gts:
        return math.nan
    prec, rec, c = [], [], 0
    for i, t in enumerate(tp):
        c += t
        prec.append(c / (i + 1))
        rec.append(c / len(gts))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        cands = [p for p, q in zip(prec, rec) if q >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101, sum(tp) / len(gts)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_ap_ar_match_oracle_single_scene(seed):
    rng = np.random.default_rng(seed)
    gts, boxes = random_scene_boxes(rng)
    if not gts:
        gts = [random_box(rng)]
    dets = [(float(rng.uniform()), b) for b in boxes]
    D = [Detection(0, BoundingBox(*b), 1, s) for s, b in dets]
    G = [(0, BoundingBox(*g), 1) for g in gts]
    per = [oracle_ap(dets, gts, t) for t in IOU_THRESHOLDS]
    assert average_precision(D, G, 1) == pytest.approx(100 * np.mean([p[0] for p in per]), abs=1e-9)
    assert average_recall(D, G, 1) == pytest.approx(100 * np.mean([p[1] for p in per]), abs=1e-9)


def test_matching_threshold_is_inclusive():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    det = np.array([[0.0, 0.0, 10.0, 5.0]])  # IoU exactly 0.5
    assert greedy_match(det, gt, 0.5)[0] == 0
    assert greedy_match(det, gt, 0.55)[0] == -1


def test_single_detection_examples():
    gt = [(0, BoundingBox(0, 0, 10, 10), 1)]
    perfect = [Detection(0, BoundingBox(0, 0, 10, 10), 1, 0.9)]
    assert average_precision(perfect, gt, 1) == 100.0
    assert average_recall(perfect, gt, 1) == 100.0
    six = [Detection(0, BoundingBox(0, 0, 10, 6), 1, 0.9)]
    assert box_iou((0, 0, 10, 6), (0, 0, 10, 10)) == pytest.approx(0.6)
    assert average_precision(six, gt, 1) == pytest.approx(30.0, abs=1e-9)
    assert average_recall(six, gt, 1) == pytest.approx(30.0, abs=1e-9)
    assert average_precision([], gt, 1) == 0.0
    assert average_recall([], gt, 1) == 0.0
    assert math.isnan(average_precision(perfect, gt, 2))
    # a detection in another scene never matches
    assert average_precision([Detection(1, BoundingBox(0, 0, 10, 10), 1, 0.9)], gt, 1) == 0.0


def _random_problem(rng, n_scenes=3):
    D, G = [], []
    for sid in range(n_scenes):
        gts, dets = random_scene_boxes(rng)
        G += [(sid, BoundingBox(*g), 0) for g in gts]
        D += [Detection(sid, BoundingBox(*b), 0, float(rng.uniform())) for b in dets]
    return D, G


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_metric_bounds_and_threshold_relaxation(seed):
    D, G = _random_problem(np.random.default_rng(seed))
    if not G:
        return
    aps = [average_precision(D, G, 0, IOU_THRESHOLDS[:k]) for k in range(1, 11)]
    ars = [average_recall(D, G, 0, IOU_THRESHOLDS[:k]) for k in range(1, 11)]
    for v in aps + ars:
        assert 0.0 <= v <= 100.0
    # dropping the strictest threshold never lowers the mean
    assert all(aps[i] >= aps[i + 1] - 1e-9 for i in range(9))
    assert all(ars[i] >= ars[i + 1] - 1e-9 for i in range(9))
    for thr in IOU_THRESHOLDS:
        # 101 recall samples: precision is 0 beyond the reached recall, at most 1 up to it
        recall = average_recall(D, G, 0, [thr]) / 100
        assert average_precision(D, G, 0, [thr]) <= 100 * (math.floor(100 * recall + 1e-9) + 1) / 101 + 1e-9


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_extra_matching_detection_never_lowers_recall(seed):
    rng = np.random.default_rng(seed)
    D, G = _random_problem(rng)
    if not G:
        return
    sid, box, _ = G[int(rng.integers(len(G)))]
    lowest = min([d.score for d in D], default=1.0)
    more = D + [Detection(sid, box, 0, lowest / 2)]
    assert average_recall(more, G, 0) >= average_recall(D, G, 0) - 1e-9


def test_nms_duplicates_and_isolated_boxes():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [30, 30, 40, 40]], dtype=float)
    keep = nms(boxes, np.array([0.5, 0.9, 0.1]))
    assert list(keep) == [1, 2]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_nms_keeps_boxes_without_heavy_overlap(seed):
    rng = np.random.default_rng(seed)
    boxes = np.array([random_box(rng, 30) for _ in range(int(rng.integers(1, 12)))])
    scores = rng.uniform(size=len(boxes))
    keep = set(nms(boxes, scores).tolist())
    for i in range(len(boxes)):
        if all(box_iou(boxes[i], boxes[j]) < 0.5 for j in range(len(boxes)) if j != i):
            assert i in keep
    kept = sorted(keep)
    for a in kept:
        for b in kept:
            if a != b:
                assert box_iou(boxes[a], boxes[b]) < 0.5


def test_top_k_keeps_highest_scores():
    rng = np.random.default_rng(0)
    dets = [Detection(0, BoundingBox(i, 0, i + 1, 1), 0, float(s)) for i, s in enumerate(rng.uniform(size=150))]
    kept = top_k(dets)
    assert len(kept) == MAX_DETECTIONS
    assert sorted(d.score for d in kept) == sorted(d.score for d in dets)[-MAX_DETECTIONS:]


def test_infer_examples():
    state = init_detector(2, [0], seed=0)
    empty = make_scene(0, [((0, 0, 10, 10), 0, [1.0, 0.0])])
    assert infer(state, empty) == []
    twin = make_scene(1, [((0, 0, 10, 10), 0, [1.0, 0.0])], [(1, 1, 11, 11), (1, 1, 11, 11)])
    dets = infer(state, twin)
    assert len(dets) == 1
    many = make_scene(2, [((0, 0, 10, 10), 0, [1.0, 0.0])], [(3 * i, 0, 3 * i + 2, 2) for i in range(150)],
                      extent=500.0)
    state2 = init_detector(2, [0, 1], seed=0)
    out = infer(state2, many)
    assert len(out) == MAX_DETECTIONS
    assert out == sorted(out, key=lambda d: -d.score)
    for d in out:
        assert 0.0 <= d.score <= 1.0


def test_harmonic_mean_examples():
    assert round(harmonic_mean(17.9, 0.7), 1) == 1.3
    assert round(harmonic_mean(32.4, 9.1), 1) == 14.2
    assert round(harmonic_mean(17.9, 1.2), 1) == 2.2
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert harmonic_mean(42.0, 42.0) == pytest.approx(42.0)


def test_evaluate_report(small_world):
    state = init_detector(8, small_world.base.visible_classes, seed=1)
    base = sorted(small_world.base.visible_classes)
    novel = sorted(small_world.novel_classes)
    rep = evaluate(state, small_world.test, base, novel)
    assert rep.novel_ap is None and rep.hm_ap is None and rep.hm_ar is None
    assert rep.base_ap is not None and 0.0 <= rep.base_ap <= 100.0
    assert set(rep.per_class) == set(base)
    assert EvalReport.from_dict(rep.to_dict()) == rep
    full = EvalReport(20.0, 30.0, 20.0, 10.0, harmonic_mean(20.0, 20.0), harmonic_mean(30.0, 10.0))
    assert full.hm_ap == 20.0 and full.hm_ar == pytest.approx(15.0)
    assert "hm_ap= 20.0" in full.summary()


def test_evaluate_skips_classes_without_ground_truth():
    state = init_detector(2, [0, 1], seed=0)
    scene = make_scene(0, [((0, 0, 10, 10), 0, [1.0, 0.0])], [(0, 0, 10, 10)])
    rep = evaluate(state, DatasetSplit([scene], {0, 1}), [0], [1])
    assert math.isnan(rep.per_class[1]["ap"])
    assert rep.novel_ap is None and rep.hm_ap is None
