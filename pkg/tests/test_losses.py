import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ifsdlab.core import DatasetSplit
from ifsdlab.detector import PARAM_ORDER, forward, init_detector, region_descriptors, register_classes
from ifsdlab.losses import (
    LossComponents,
    LossConfig,
    apply_deltas,
    batch_loss,
    box_deltas,
    build_batch,
    classification_loss,
    distillation_loss,
    entropy,
    localization_loss,
    objectness_loss,
    precompute_distill_targets,
    scaled_softmax,
    scene_regions,
    select_positive_regions,
    smooth_l1,
    total_loss,
)

from conftest import make_scene
from oracles import finite_difference_check, kl_divergence, softmax_loop


def test_scaled_softmax_examples():
    for c in (-3.0, 0.0, 50.0):
        for T in (0.5, 1.0, 20.0):
            assert np.allclose(scaled_softmax([c, c, c], T), [1 / 3] * 3)
    T = 20.0
    assert np.allclose(scaled_softmax([T * math.log(2), 0.0], T), [2 / 3, 1 / 3], atol=1e-15)
    p = scaled_softmax([1000.0, 0.0], 1.0)
    assert np.all(np.isfinite(p)) and p[0] == 1.0


@given(arrays(float, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(0.1, 30))
def test_scaled_softmax_matches_loop(z, T):
    assert np.allclose(scaled_softmax(z, T), softmax_loop(list(z), T), atol=1e-12)
    assert scaled_softmax(z, T).sum() == pytest.approx(1.0, abs=1e-12)


def test_positive_selection_is_strict():
    gt = (0, 0, 10, 10)
    # shifts giving IoU 0.72, 0.7 exactly and 0.2
    props = [(10 * (1 - 0.72) / 1.72, 0, 10 + 10 * (1 - 0.72) / 1.72, 10), (0, 0, 10, 7), (8, 0, 18, 10)]
    scene = make_scene(0, [(gt, 0, [0.0])], props)
    ious = [p.max_iou for p in scene.proposals]
    assert ious[0] == pytest.approx(0.72) and ious[1] == pytest.approx(0.7)
    chosen = select_positive_regions(scene, 0.7)
    assert [p.box for p, _ in chosen] == [scene.proposals[0].box]
    assert chosen[0][1] == 0
    bg = make_scene(1, [(gt, 0, [0.0])], [(40, 40, 50, 50), (8, 8, 18, 18)])
    assert select_positive_regions(bg, 0.7) == []


def test_classification_loss_values():
    assert classification_loss(np.array([[0.0, 0.0, 0.0, 0.0]]), [2]) == pytest.approx(math.log(4))
    assert classification_loss(np.array([[0.0, 500.0]]), [1]) < 1e-12
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 5))
    y = np.array([0, 3, 1, 4])
    hand = -sum(math.log(softmax_loop(list(z[i]))[y[i]]) for i in range(4)) / 4
    assert classification_loss(z, y) == pytest.approx(hand, abs=1e-12)


def test_distillation_hand_example():
    # current logits chosen so the restricted softmax is [0.4, 0.4, 0.2]
    logits = np.log(np.array([[0.4, 0.4, 0.2]]))
    val = distillation_loss(logits, np.array([[0.5, 0.3, 0.2]]), T=1.0, num_old=2)
    assert val == pytest.approx(-(0.5 * math.log(0.4) + 0.3 * math.log(0.4) + 0.2 * math.log(0.2)), abs=1e-12)


def test_distillation_identity_equals_entropy():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 5)) * 4
    T = 20.0
    q = scaled_softmax(z, T)
    assert distillation_loss(z, q, T, num_old=4) == pytest.approx(entropy(q).mean(), abs=1e-12)
    # novel columns appended to the current logits do not enter the restricted softmax
    wide = np.hstack([z, rng.normal(size=(6, 2)) * 10])
    assert distillation_loss(wide, q, T, num_old=4) == pytest.approx(entropy(q).mean(), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_distillation_minus_entropy_is_kl(seed):
    rng = np.random.default_rng(seed)
    T = float(rng.uniform(0.5, 25))
    n_old = int(rng.integers(1, 6))
    q = scaled_softmax(rng.normal(size=(3, n_old + 1)) * 5, 1.0)
    z = rng.normal(size=(3, n_old + 1 + int(rng.integers(0, 3)))) * 5
    kd = distillation_loss(z, q, T, n_old)
    kl = np.mean([kl_divergence(q[i], softmax_loop(list(z[i, :n_old + 1]), T)) for i in range(3)])
    assert kd - entropy(q).mean() == pytest.approx(kl, abs=1e-9)
    assert kl >= -1e-12
    # shifting every logit by one constant leaves the loss unchanged
    assert distillation_loss(z + 7.5, q, T, n_old) == pytest.approx(kd, abs=1e-9)


def test_distillation_minimised_at_target():
    rng = np.random.default_rng(3)
    T = 20.0
    z0 = rng.normal(size=(1, 4)) * 3
    q = scaled_softmax(z0, T)
    best = distillation_loss(z0, q, T, 3)
    for _ in range(50):
        z = z0 + rng.normal(size=z0.shape)
        if not np.allclose(scaled_softmax(z, T), q):
            assert distillation_loss(z, q, T, 3) > best


def test_distillation_width_mismatch():
    with pytest.raises(ValueError):
        distillation_loss(np.zeros((1, 4)), np.ones((1, 2)) / 2, 1.0, num_old=3)


def test_smooth_l1_and_deltas():
    assert smooth_l1(np.array(0.5)) == 0.125
    assert smooth_l1(np.array(2.0)) == 1.5
    assert smooth_l1(np.array(-2.0)) == 1.5
    box = np.array([[2.0, 3.0, 12.0, 9.0]])
    assert np.array_equal(box_deltas(box, box), np.zeros((1, 4)))
    assert localization_loss(np.zeros((1, 4)), box_deltas(box, box)) == 0.0
    target = np.array([[4.0, 2.0, 11.0, 12.0]])
    assert np.allclose(apply_deltas(box, box_deltas(box, target)), target)
    assert localization_loss(np.zeros((0, 4)), np.zeros((0, 4))) == 0.0


def test_objectness_bce():
    s = np.array([0.0, 2.0, -1.0])
    y = np.array([1.0, 0.0, 1.0])
    hand = np.mean([math.log(2), math.log(1 + math.exp(2)), math.log(1 + math.exp(1))])
    assert objectness_loss(s, y) == pytest.approx(hand)


def test_total_loss_weighting():
    c = LossComponents(0.3, 0.2, 0.5, 0.1)
    assert total_loss(c, 1.0) == pytest.approx(1.1)
    assert total_loss(LossComponents(0.0, 0.0, 0.0, 0.01), 20.0) == pytest.approx(4.0)
    assert total_loss(LossComponents(0.3, 0.2, 0.5, None), 20.0) == pytest.approx(1.0)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.0)
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)


def test_store_contents(small_world):
    state = init_detector(8, [0, 1, 2], seed=2)
    store = precompute_distill_targets(state, small_world.base, 20.0)
    assert store.width == 4 and len(store) == sum(1 for _ in small_world.base.annotations())
    for v in store.targets.values():
        assert v.shape == (4,) and v.sum() == pytest.approx(1.0, abs=1e-9)
    # zeroed classifier: every logit equal, every target uniform
    flat = state.copy()
    flat.params["cls.W"][:] = 0.0
    flat.params["cls.b"][:] = 0.0
    uniform = precompute_distill_targets(flat, small_world.base, 20.0)
    assert all(np.allclose(v, 0.25) for v in uniform.targets.values())
    with pytest.raises(KeyError):
        store[(10 ** 6, 0)]
    no_bg = precompute_distill_targets(state, small_world.base, 20.0, include_background=False)
    assert no_bg.width == 3


def test_hidden_instances_are_background_for_training():
    scene = make_scene(0, [((0, 0, 10, 10), 0, [1.0, 0]), ((50, 50, 60, 60), 5, [0, 1.0])],
                       [(0.5, 0, 10.5, 10), (50.5, 50, 60.5, 60)])
    full = scene_regions(scene)
    part = scene_regions(scene, visible={0})
    assert list(full.matched_cls[:2]) == [0, 5]
    assert list(part.matched_cls[:2]) == [0, -1] and part.max_iou[1] == 0.0
    # hidden instance contributes no ground-truth region but still shapes descriptors
    assert len(part.boxes) == len(full.boxes) - 1
    assert np.array_equal(part.x[:2], full.x[:2])


def _gradcheck_batch(small_world, include_background=True, over_all=False, with_store=True):
    state = init_detector(8, [0, 1, 2], seed=3)
    rng = np.random.default_rng(0)
    for k in state.params:
        state.params[k] = state.params[k] + 0.3 * rng.standard_normal(state.params[k].shape)
    cfg = LossConfig(distill_background=include_background, distill_over_all=over_all)
    store = precompute_distill_targets(state, small_world.base, cfg.temperature, include_background) \
        if with_store else None
    new = register_classes(state, [3, 4])
    for k in new.params:
        new.params[k] = new.params[k] + 0.1 * rng.standard_normal(new.params[k].shape)
    regions = [scene_regions(s, small_world.base.visible_classes) for s in small_world.base.scenes[:4]]
    batch = build_batch(regions, new, cfg, np.random.default_rng(0), store)
    return new, batch, cfg, (3 if with_store else None)


@pytest.mark.parametrize("bg,over_all", [(True, False), (False, False), (True, True)])
def test_total_loss_gradient(small_world, bg, over_all):
    state, batch, cfg, n_old = _gradcheck_batch(small_world, bg, over_all)
    comps, grads = batch_loss(state, batch, cfg, n_old)
    assert comps.kd is not None and len(batch.pos_idx) > 0

    def f():
        c, _ = batch_loss(state, batch, cfg, n_old, with_grad=False)
        return total_loss(c, cfg.temperature)

    res = finite_difference_check(f, state.params, grads, PARAM_ORDER, per_key=8)
    assert max(err for err, _ in res.values()) < 1e-4, res


def test_batch_loss_without_store_has_no_kd(small_world):
    state, batch, cfg, n_old = _gradcheck_batch(small_world, with_store=False)
    comps, _ = batch_loss(state, batch, cfg, n_old)
    assert comps.kd is None and batch.kd_targets is None


def test_background_scene_has_zero_localization():
    scene = make_scene(0, [((0, 0, 10, 10), 0, [1.0, 0])], [(40, 40, 50, 50), (60, 60, 70, 75)])
    state = init_detector(2, [0], seed=0)
    regions = [scene_regions(scene, visible=set())]
    batch = build_batch(regions, state, LossConfig(), np.random.default_rng(0))
    comps, _ = batch_loss(state, batch, LossConfig())
    assert len(batch.pos_idx) == 0 and comps.loc == 0.0


def test_build_batch_sampling_ratio(small_world):
    state = init_detector(8, [0, 1, 2], seed=0)
    regions = [scene_regions(s, small_world.base.visible_classes) for s in small_world.base.scenes[:4]]
    batch = build_batch(regions, state, LossConfig(), np.random.default_rng(0))
    n_pos = len(batch.pos_idx)
    n_bg = int((batch.cls_labels == 0).sum())
    assert n_pos > 0 and n_bg <= 3 * n_pos
    pos_iou = np.concatenate([r.max_iou for r in regions])[batch.pos_idx]
    assert np.all(pos_iou > 0.7)
