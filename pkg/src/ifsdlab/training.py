"""Pre-training on base classes and incremental transfer sessions."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .core import DatasetSplit, Scene, TaskMode, TaskSequence, merge_splits, reorder
from .detector import (
    BIASES,
    PARAM_ORDER,
    PRETRAIN_TRAINABLE,
    DetectorState,
    TransferStrategy,
    init_detector,
    register_classes,
)
from .evaluation import EvalReport, evaluate
from .exemplars import (
    FEATURE_LAYERS,
    ExemplarSet,
    class_centroids,
    extract_image_class_features,
    select_exemplars_classmean,
    select_exemplars_clustering,
    select_exemplars_random,
)
from .losses import DistillTargetStore, LossConfig, batch_loss, build_batch, precompute_distill_targets, \
    scene_regions, total_loss
from .rng import substream

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, stage: str, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} in {stage} at epoch {epoch}, step {step}")
        self.stage, self.epoch, self.step, self.value = stage, epoch, step, value


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 6
    pretrain_lr: float = 0.01
    lr_drop_epoch: int = 4
    lr_drop_factor: float = 10.0
    transfer_epochs: int = 10
    transfer_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_scenes: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.pretrain_lr, self.transfer_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.pretrain_epochs, self.transfer_epochs, self.batch_scenes) < 1:
            raise ValueError("epochs and batch size must be at least 1")

    def to_dict(self):
        return asdict(self)


class ExemplarMethod(str, Enum):
    NONE = "none"
    CLUSTERING = "e"
    RANDOM = "e_r"
    CLASSMEAN = "e_a"


@dataclass(frozen=True)
class SessionRecipe:
    strategy: TransferStrategy = TransferStrategy.FIT_CSE
    use_distillation: bool = True
    exemplar_method: ExemplarMethod = ExemplarMethod.CLUSTERING
    loss: LossConfig = field(default_factory=LossConfig)
    # continual mode: reuse the pre-trained model's targets instead of recomputing per session
    reuse_base_targets: bool = False
    # network layer whose features drive exemplar selection
    exemplar_layer: str = "object"

    def __post_init__(self):
        if self.exemplar_layer not in FEATURE_LAYERS:
            raise ValueError(f"exemplar_layer must be one of {sorted(FEATURE_LAYERS)}")

    @property
    def label(self) -> str:
        s = self.strategy.value
        if self.use_distillation:
            s += "+d"
        if self.exemplar_method is not ExemplarMethod.NONE:
            s += "+" + self.exemplar_method.value
        return s

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "use_distillation": self.use_distillation,
            "exemplar_method": self.exemplar_method.value,
            "loss": asdict(self.loss),
            "reuse_base_targets": self.reuse_base_targets,
            "exemplar_layer": self.exemplar_layer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionRecipe":
        return cls(TransferStrategy(d["strategy"]), bool(d["use_distillation"]),
                   ExemplarMethod(d["exemplar_method"]), LossConfig(**d.get("loss", {})),
                   bool(d.get("reuse_base_targets", False)), d.get("exemplar_layer", "object"))


class SGD:
    """Momentum SGD with decoupled-from-bias L2 weight decay.

    v <- momentum * v + (g + wd * theta);  theta <- theta - lr * v
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4, no_decay=BIASES):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = frozenset(no_decay)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, trainable) -> None:
        for k in trainable:
            g = grads[k]
            if self.weight_decay and k not in self.no_decay:
                g = g + self.weight_decay * params[k]
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[k] = v
            params[k] -= lr * v


@dataclass
class TraceRow:
    stage: str
    epoch: int
    step: int
    lr: float
    total: float
    rpn: float
    loc: float
    cls: float
    kd: float | None


TRACE_HEADER = "stage,epoch,step,lr,total,rpn,loc,cls,kd"


def trace_csv(rows: Sequence[TraceRow]) -> str:
    def f(v):
        return "" if v is None else repr(float(v))
    lines = [TRACE_HEADER]
    for r in rows:
        lines.append(",".join([r.stage, str(r.epoch), str(r.step), f(r.lr), f(r.total), f(r.rpn), f(r.loc),
                               f(r.cls), f(r.kd)]))
    return "\n".join(lines) + "\n"


def _train(state: DetectorState, split: DatasetSplit, loss_cfg: LossConfig, trainable: frozenset[str],
           epochs: int, lr_at, cfg: TrainConfig, rng: np.random.Generator, stage: str,
           store: DistillTargetStore | None = None) -> list[TraceRow]:
    """Optimise `state` in place; one epoch is one shuffled pass over the split's scenes."""
    regions = [scene_regions(s, split.visible_for(s)) for s in split.scenes if s.instances]
    opt = SGD(cfg.momentum, cfg.weight_decay)
    num_old = None if store is None else len(store.old_classes)
    trace = []
    step = 0
    for epoch in range(epochs):
        lr = lr_at(epoch)
        order = rng.permutation(len(regions))
        for start in range(0, len(order), cfg.batch_scenes):
            chunk = [regions[i] for i in order[start:start + cfg.batch_scenes]]
            batch = build_batch(chunk, state, loss_cfg, rng, store)
            comps, grads = batch_loss(state, batch, loss_cfg, num_old, trainable)
            total = total_loss(comps, loss_cfg.temperature, loss_cfg.loc_weight, loss_cfg.rpn_weight)
            if not np.isfinite(total):
                raise NumericalError(stage, epoch, step, total)
            opt.step(state.params, grads, lr, trainable)
            trace.append(TraceRow(stage, epoch, step, lr, total, comps.rpn, comps.loc, comps.cls, comps.kd))
            step += 1
    return trace


def epoch_means(trace: Sequence[TraceRow]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in trace:
        by_epoch.setdefault(r.epoch, []).append(r.total)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def pretrain(base: DatasetSplit, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
             dims: dict | None = None) -> tuple[DetectorState, list[TraceRow]]:
    """Train a fresh detector on the base classes with the step-decayed learning rate."""
    loss_cfg = loss_cfg or LossConfig()
    d_world = base.scenes[0].instances[0].latent_feature.shape[0]
    state = init_detector(d_world, sorted(base.visible_classes), seed=cfg.seed, **(dims or {}))

    def lr_at(epoch):
        return cfg.pretrain_lr / (cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else 1.0)

    rng = substream(cfg.seed, "sampling-pretrain")
    trace = _train(state, base, loss_cfg, PRETRAIN_TRAINABLE, cfg.pretrain_epochs, lr_at, cfg, rng, "pretrain")
    return state, trace


def select_exemplars(state: DetectorState, base: DatasetSplit, method: ExemplarMethod, k: int,
                     seed: int = 0, layer: str = "object") -> ExemplarSet | None:
    """Pick base scenes for replay. Random selection draws as many scenes as clustering picks."""
    if method is ExemplarMethod.NONE:
        return None
    classes = sorted(base.visible_classes)
    feats = extract_image_class_features(state, base.scenes, classes, layer=layer)
    if method is ExemplarMethod.CLASSMEAN:
        return select_exemplars_classmean(feats, classes, k)
    cents = class_centroids(feats, classes, k, seed=seed)
    chosen = select_exemplars_clustering(feats, cents, k)
    if method is ExemplarMethod.CLUSTERING:
        chosen.seed = seed
        return chosen
    return select_exemplars_random([s.scene_id for s in base.scenes], len(chosen), seed)


def exemplar_split(exemplars: ExemplarSet | None, base: DatasetSplit) -> DatasetSplit | None:
    if exemplars is None:
        return None
    by_id = base.by_id()
    return DatasetSplit(tuple(by_id[i] for i in exemplars.scenes), base.visible_classes)


def build_transfer_set(shots: DatasetSplit, memory: DatasetSplit | None, seed: int = 0) -> DatasetSplit:
    """Replay memory plus the new K-shot scenes, in a seeded shuffled order."""
    merged = merge_splits(memory, shots)
    order = substream(seed, "transfer-set").permutation(len(merged.scenes))
    return reorder(merged, order)


def transfer_session(state: DetectorState, recipe: SessionRecipe, transfer_set: DatasetSplit,
                     new_classes: Sequence[int], cfg: TrainConfig, session: int = 0,
                     store: DistillTargetStore | None = None
                     ) -> tuple[DetectorState, list[TraceRow], DistillTargetStore | None]:
    """Distillation targets (under the incoming model), head expansion, then fine-tuning.

    A pre-built `store` is used as is; otherwise one is computed when the recipe distils.
    """
    T = recipe.loss.temperature
    if recipe.use_distillation and store is None:
        store = precompute_distill_targets(state, transfer_set, T, recipe.loss.distill_background)
    if not recipe.use_distillation:
        store = None
    # every annotated box is itself a positive region, so an empty store means no positives at all
    if store is not None and len(store) == 0:
        log.warning("no positive regions in the transfer set; distillation contributes nothing")
    new_state = register_classes(state, new_classes)
    rng = substream(cfg.seed, f"sampling-session-{session}")
    trace = _train(new_state, transfer_set, recipe.loss, recipe.strategy.trainable, cfg.transfer_epochs,
                   lambda e: cfg.transfer_lr, cfg, rng, f"session-{session}", store)
    return new_state, trace, store


@dataclass
class SessionResult:
    index: int
    state: DetectorState
    report: EvalReport | None
    trace: list[TraceRow]
    store: DistillTargetStore | None = None

    @property
    def old_classes(self) -> tuple[int, ...] | None:
        return None if self.store is None else self.store.old_classes


def run_task_sequence(state: DetectorState, sequence: TaskSequence, recipe: SessionRecipe, cfg: TrainConfig,
                      test: DatasetSplit, memory: DatasetSplit | None = None,
                      evaluate_each: bool = True) -> list[SessionResult]:
    """Apply one transfer per session and evaluate on every class seen so far.

    In continual mode with replay, each session's shots join the memory afterwards. With
    `evaluate_each` off only the final session is evaluated (the others carry no report).
    """
    base_classes = tuple(sequence.base_classes) or state.classes
    fixed_store = None
    if recipe.use_distillation and recipe.reuse_base_targets and sequence.mode is TaskMode.CONTINUAL:
        everything = merge_splits(memory, *(s.shots for s in sequence.sessions))
        fixed_store = precompute_distill_targets(state, everything, recipe.loss.temperature,
                                                 recipe.loss.distill_background)
    results = []
    seen_novel: list[int] = []
    for i, sess in enumerate(sequence.sessions):
        tset = build_transfer_set(sess.shots, memory, seed=cfg.seed + 1000 * i)
        state, trace, store = transfer_session(state, recipe, tset, sess.new_classes, cfg, i, fixed_store)
        seen_novel.extend(sess.new_classes)
        last = i == len(sequence.sessions) - 1
        report = evaluate(state, test, base_classes, seen_novel) if evaluate_each or last else None
        results.append(SessionResult(i + 1, state, report, trace, store))
        if memory is not None:
            memory = merge_splits(memory, sess.shots)
    return results
