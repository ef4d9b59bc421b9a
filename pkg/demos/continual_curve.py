"""Base AP after each one-class session, with and without replay and distillation."""

from ifsdlab.standard import DENSE_SCENES, run_continual, standard_loss_config
from ifsdlab.training import ExemplarMethod, SessionRecipe, TransferStrategy

loss = standard_loss_config()
recipes = [SessionRecipe(TransferStrategy.FIT_CSE, False, ExemplarMethod.NONE, loss),
           SessionRecipe(TransferStrategy.FIT_CSE, True, ExemplarMethod.CLUSTERING, loss)]
curves = run_continual(range(10), recipes, world_overrides=DENSE_SCENES)

for label, v in curves.items():
    mean = v.mean(axis=0)
    print(f"{label:12s}", " ".join(f"{x:5.1f}" for x in mean), f"  kept {mean[-1] / mean[0]:.0%}")
