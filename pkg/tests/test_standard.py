import numpy as np
import pytest

from ifsdlab.detector import TransferStrategy
from ifsdlab.standard import (
    METRICS,
    format_table,
    grid_recipes,
    run_ablation,
    run_continual,
    standard_loss_config,
    standard_world_config,
)
from ifsdlab.training import ExemplarMethod, SessionRecipe

TINY_WORLD = {"scenes_per_base_class": 6, "test_scenes": 10, "num_novel_classes": 2}
TINY_TRAIN = {"pretrain_epochs": 2, "lr_drop_epoch": 1, "transfer_epochs": 2}
TINY_DIMS = {"d_obj": 4, "hidden": 8}


def test_grid_has_every_combination():
    recipes = grid_recipes()
    assert len(recipes) == 24 and len({r.label for r in recipes}) == 24
    assert all(not r.loss.distill_background for r in recipes)


def test_standard_world_skews_train_only():
    cfg = standard_world_config(3)
    assert cfg.seed == 3 and cfg.mode_weights[0] > 0.5
    assert len(set(cfg.test_mode_weights)) == 1
    assert standard_world_config(0, feature_noise=0.5).feature_noise == 0.5


def test_recipe_rejects_unknown_layer():
    with pytest.raises(ValueError):
        SessionRecipe(TransferStrategy.FIT_CSE, True, ExemplarMethod.CLUSTERING, exemplar_layer="pixels")
    r = SessionRecipe(TransferStrategy.FIT_CSE, True, ExemplarMethod.CLUSTERING, exemplar_layer="hidden")
    assert SessionRecipe.from_dict(r.to_dict()) == r


def test_run_ablation_shapes_and_determinism():
    recipes = [SessionRecipe(TransferStrategy.FIX_ALL, False, ExemplarMethod.NONE, standard_loss_config()),
               SessionRecipe(TransferStrategy.FIT_CSE, True, ExemplarMethod.CLUSTERING, standard_loss_config())]
    kw = dict(recipes=recipes, world_overrides=TINY_WORLD, train_overrides=TINY_TRAIN, dims=TINY_DIMS)
    a = run_ablation([0, 1], **kw)
    assert set(a) == {r.label for r in recipes}
    assert all(v.shape == (2, len(METRICS)) for v in a.values())
    b = run_ablation([0, 1], **kw)
    assert all(np.array_equal(a[k], b[k], equal_nan=True) for k in a)
    table = format_table(a).splitlines()
    assert len(table) == 3 and table[0].split()[0] == "recipe"


def test_run_continual_shape():
    r = SessionRecipe(TransferStrategy.FIT_CSE, False, ExemplarMethod.NONE, standard_loss_config())
    out = run_continual([0], [r], world_overrides=TINY_WORLD, train_overrides=TINY_TRAIN, dims=TINY_DIMS)
    assert out[r.label].shape == (1, 2)
