"""Pre-train on the base classes of one synthetic world, then add the novel classes in one transfer."""

from ifsdlab.standard import STANDARD_DIMS, desk_train_config, standard_loss_config, standard_world_config
from ifsdlab.training import ExemplarMethod, SessionRecipe, TransferStrategy, exemplar_split, pretrain, \
    run_task_sequence, select_exemplars
from ifsdlab.world import generate_world

wcfg = standard_world_config(seed=0)
world = generate_world(wcfg)
cfg = desk_train_config(seed=0)
print(f"{len(world.base.scenes)} base scenes, {len(world.sequence.sessions[0].new_classes)} novel classes, "
      f"{len(world.test.scenes)} test scenes")

state, trace = pretrain(world.base, cfg, dims=STANDARD_DIMS)
print(f"pre-training: loss {trace[0].total:.3f} -> {trace[-1].total:.3f}")

recipe = SessionRecipe(TransferStrategy.FIT_CSE, True, ExemplarMethod.CLUSTERING, standard_loss_config())
exemplars = select_exemplars(state, world.base, recipe.exemplar_method, wcfg.shots_K)
print(f"replay memory: {len(exemplars)} base scenes")

result = run_task_sequence(state, world.sequence, recipe, cfg, world.test, exemplar_split(exemplars, world.base))[-1]
r = result.report
print(f"{recipe.label}: base AP {r.base_ap:.1f}  novel AP {r.novel_ap:.1f}  HM {r.hm_ap:.1f}")
