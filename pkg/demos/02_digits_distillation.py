"""
Data-free distillation on a laptop
==================================

The full MNIST recipe takes hours on a CPU. This walk-through runs the same
pipeline on scikit-learn's small digits set, written out in MNIST's file
layout, with a narrower generator and a shorter schedule:

1. train a LeNet-5 teacher on real digits,
2. distill it into LeNet-5-Half using generated images only,
3. look at what the generator learned and where both networks attend.
"""

# %%
import tempfile
import time
from pathlib import Path

import torch

import cgdd

torch.manual_seed(0)
work = Path(tempfile.mkdtemp(prefix="cgdd-demo-"))
folder = cgdd.export_sklearn_digits(work / "mnist")
train = cgdd.load_eval_dataset("mnist", folder, split="train")
test = cgdd.load_eval_dataset("mnist", folder, split="test")
print(len(train), "train /", len(test), "test images of shape", test.image_shape)

# %% [markdown]
# The teacher is the only thing that ever sees real training images.

# %%
teacher, t_acc = cgdd.train_teacher("lenet5", train, cgdd.TeacherSchedule(epochs=30, batch_size=64), test)
print(f"teacher accuracy {t_acc:.4f}")

# %% [markdown]
# Distillation. With so few training steps the class-matching weight is
# raised well above its default so that generated images honour their labels
# early; the rest of the weights keep their defaults.

# %%
spec = cgdd.GeneratorSpec(trunk_widths=(32, 32, 16))
schedule = cgdd.TrainSchedule(epochs=20, steps_per_epoch=10, batch_size=64, lr_decay_epochs=(16,))
weights = cgdd.LossWeights(lambda_CM=20)

start = time.time()


def report(distiller, rec):
    if rec["epoch"] % 5 == 0:
        print(f"epoch {rec['epoch']:2d}  S_acc {rec['accuracy']:.4f}  L_DE {rec['L_DE']:.3f}  "
              f"L_CM {rec['L_CM']:.3f}  ({time.time() - start:.0f}s)")


student, generator, state = cgdd.run_distillation(
    teacher, spec, schedule, weights,
    evaluator=lambda s: cgdd.evaluate(s, test), teacher_accuracy=t_acc,
    callbacks=[report], run_dir=work / "run",
)
s_acc = cgdd.evaluate(student, test)
print(f"student {s_acc:.4f}, relative accuracy {cgdd.relative_accuracy(t_acc, s_acc):.2f}%")
print("real images seen during distillation:", state.real_images_seen)

# %% [markdown]
# Does the generator draw the class it was asked for? Ask the teacher.

# %%
generator.eval()
with torch.no_grad():
    batch = cgdd.sample_conditioned_noise(1000, spec.noise_dim, cgdd.uniform_distribution(10), seed=1)
    agree = (teacher(cgdd.generate(generator, batch)).argmax(1) == batch.labels.labels).float().mean()
print(f"teacher agrees with the preset label on {agree:.1%} of 1000 generated images")

# %% [markdown]
# One column per class, eight samples each, and Grad-CAM overlays for a few
# test images (teacher row above student row).

# %%
grid = cgdd.dump_image_grid(generator, work / "grid.png", rows=8)
cgdd.export_attention_heatmaps(teacher, student, test.images[:3], work / "attention", mean=test.mean, std=test.std)
print("wrote", grid, "and", work / "attention")
