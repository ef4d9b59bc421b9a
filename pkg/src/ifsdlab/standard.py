"""The standard desk-scale setup and helpers that run the ablation grid and continual curves on it.

The standard world skews training data toward one dominant mode per class (0.8 / 0.15 / 0.05) and
tests on all modes equally, so a replay memory that misses rare modes is penalised. Training runs
longer and faster than the full-scale schedule because the toy detector starts from scratch.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Sequence

import numpy as np

from .core import TaskMode
from .detector import TransferStrategy
from .losses import LossConfig
from .training import (
    ExemplarMethod,
    SessionRecipe,
    TrainConfig,
    exemplar_split,
    pretrain,
    run_task_sequence,
    select_exemplars,
)
from .world import WorldConfig, generate_world

STANDARD_DIMS = {"d_obj": 16, "hidden": 64}
METRICS = ("base_ap", "novel_ap", "hm_ap")
# busier scenes put more unannotated base objects into each one-class session
DENSE_SCENES = {"instances_per_scene": (3, 7)}


def standard_world_config(seed: int = 0, **overrides) -> WorldConfig:
    kw = dict(mode_weights=(0.8, 0.15, 0.05), test_mode_weights=(1.0, 1.0, 1.0), feature_noise=0.25, seed=seed)
    kw.update(overrides)
    return WorldConfig(**kw)


def desk_train_config(seed: int = 0, **overrides) -> TrainConfig:
    kw = dict(pretrain_epochs=20, pretrain_lr=0.05, lr_drop_epoch=15, transfer_epochs=15, transfer_lr=0.02,
              seed=seed)
    kw.update(overrides)
    return TrainConfig(**kw)


def standard_loss_config(**overrides) -> LossConfig:
    # old-class distribution without the background column
    return LossConfig(**{"distill_background": False, **overrides})


def grid_recipes(loss: LossConfig | None = None) -> list[SessionRecipe]:
    """All 24 strategy x distillation x exemplar combinations."""
    loss = loss or standard_loss_config()
    return [SessionRecipe(s, d, m, loss)
            for s, d, m in itertools.product(TransferStrategy, (False, True), ExemplarMethod)]


def run_ablation(seeds: Iterable[int], recipes: Sequence[SessionRecipe] | None = None,
                 world_overrides: dict | None = None, train_overrides: dict | None = None,
                 dims: dict | None = None, k: int | None = None) -> dict[str, np.ndarray]:
    """Typical-mode final metrics per recipe label, one row per seed: (base_ap, novel_ap, hm_ap).

    Each seed pre-trains once; every recipe transfers from that shared checkpoint.
    """
    recipes = list(recipes or grid_recipes())
    dims = STANDARD_DIMS if dims is None else dims
    rows: dict[str, list] = {r.label: [] for r in recipes}
    for seed in seeds:
        wcfg = standard_world_config(seed, **(world_overrides or {}))
        world = generate_world(wcfg)
        cfg = desk_train_config(seed, **(train_overrides or {}))
        state, _ = pretrain(world.base, cfg, dims=dims)
        shots_k = k or wcfg.shots_K
        memories = {}
        for r in recipes:
            key = (r.exemplar_method, r.exemplar_layer)
            if key not in memories:
                ex = select_exemplars(state, world.base, r.exemplar_method, shots_k, seed, r.exemplar_layer)
                memories[key] = exemplar_split(ex, world.base)
            rep = run_task_sequence(state, world.sequence, r, cfg, world.test, memories[key])[-1].report
            rows[r.label].append([getattr(rep, m) for m in METRICS])
    return {label: np.array(v, dtype=float) for label, v in rows.items()}


def run_continual(seeds: Iterable[int], recipes: Sequence[SessionRecipe], world_overrides: dict | None = None,
                  train_overrides: dict | None = None, dims: dict | None = None) -> dict[str, np.ndarray]:
    """Base AP after every continual session, shape (seeds, sessions) per recipe label."""
    dims = STANDARD_DIMS if dims is None else dims
    out: dict[str, list] = {r.label: [] for r in recipes}
    for seed in seeds:
        wcfg = standard_world_config(seed, **(world_overrides or {}))
        world = generate_world(wcfg)
        cfg = desk_train_config(seed, **(train_overrides or {}))
        state, _ = pretrain(world.base, cfg, dims=dims)
        seq = world.sequence.as_mode(TaskMode.CONTINUAL)
        for r in recipes:
            ex = select_exemplars(state, world.base, r.exemplar_method, wcfg.shots_K, seed, r.exemplar_layer)
            res = run_task_sequence(state, seq, r, cfg, world.test, exemplar_split(ex, world.base))
            out[r.label].append([x.report.base_ap for x in res])
    return {label: np.array(v, dtype=float) for label, v in out.items()}


def format_table(results: dict[str, np.ndarray]) -> str:
    lines = [f"{'recipe':16s} {'base AP':>8s} {'novel AP':>9s} {'HM':>6s}"]
    for label, v in sorted(results.items(), key=lambda kv: -kv[1][:, 2].mean()):
        b, n, h = v.mean(axis=0)
        lines.append(f"{label:16s} {b:8.1f} {n:9.1f} {h:6.1f}")
    return "\n".join(lines)
