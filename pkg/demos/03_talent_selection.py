"""
Screening loss weights on a short budget
========================================

Full runs are expensive, so candidate weightings are first trained for a
few epochs with the learning-rate decay moved to the same relative point,
and only the best few go on to full training.
"""

# %%
import tempfile
from pathlib import Path

import torch

import cgdd

torch.manual_seed(0)
folder = cgdd.export_sklearn_digits(Path(tempfile.mkdtemp()) / "mnist")
train = cgdd.load_eval_dataset("mnist", folder, split="train")
test = cgdd.load_eval_dataset("mnist", folder, split="test")
teacher, t_acc = cgdd.train_teacher("lenet5", train, cgdd.TeacherSchedule(epochs=30, batch_size=64), test)

# %% [markdown]
# Four candidates around the default weights. The full schedule is 20 epochs
# with a decay at 16; screening uses 5 epochs, which moves the decay to 4.

# %%
full = cgdd.TrainSchedule(epochs=20, steps_per_epoch=10, batch_size=64, lr_decay_epochs=(16,))
candidates = [
    cgdd.CandidateSetting("defaults", cgdd.LossWeights(), full),
    cgdd.CandidateSetting("cm x5", cgdd.LossWeights(lambda_CM=5), full),
    cgdd.CandidateSetting("cm x20", cgdd.LossWeights(lambda_CM=20), full),
    cgdd.CandidateSetting("no attention", cgdd.LossWeights(lambda_CM=20, lambda_AT=0), full),
]
spec = cgdd.GeneratorSpec(trunk_widths=(32, 32, 16))


def screen(candidate):
    _, _, state = cgdd.run_distillation(
        teacher, spec, candidate.schedule, candidate.weights,
        evaluator=lambda s: cgdd.evaluate(s, test), teacher_accuracy=t_acc,
    )
    return state.history[-1]["relative_accuracy"], state.history


report = cgdd.talent_select(candidates, budget_epochs=5, eval_fn=screen)
for r in report.ranking:
    print(f"{r.rank}. {r.candidate.identifier:<13} Rel_acc {r.score:6.2f}  decay at {r.budget_schedule.lr_decay_epochs}")
print("recommended for full training:", [r.candidate.identifier for r in report.recommended])
