"""
How the distillation losses behave
==================================

A short tour of the loss terms on hand-made logits: what each term rewards,
and why the student is matched to the teacher with an absolute-error term
rather than a squared one.
"""

# %%
import torch

from cgdd import losses as L

torch.set_printoptions(precision=4)

# %% [markdown]
# The class-matching term is plain cross-entropy between the teacher's
# prediction on a synthetic image and the label the image was generated for.
# Uniform logits give ln(c); a confident, correct teacher drives it to zero.

# %%
labels = torch.tensor([0, 0])
for logits in ([[0.0, 0.0, 0.0]] * 2, [[2.0, 0.0, 0.0]] * 2, [[8.0, 0.0, 0.0]] * 2):
    print(logits[0], float(L.class_matching_loss(torch.tensor(logits), labels)))

# %% [markdown]
# The information-entropy term looks at the *batch-average* prediction.
# It is lowest when the batch covers every class evenly and zero when the
# whole batch collapses onto one class.

# %%
even = torch.eye(4) * 10
collapsed = torch.zeros(4, 4)
collapsed[:, 0] = 10
print("even batch     ", float(L.information_entropy_loss(even)))
print("collapsed batch", float(L.information_entropy_loss(collapsed)))
print("lower bound    ", -torch.log(torch.tensor(4.0)).item() / 4)

# %% [markdown]
# Absolute versus squared error. As the student closes in on the teacher, the
# squared-error gradient shrinks with the gap while the absolute-error
# gradient stays at 1/n per coordinate, so the generator keeps receiving a
# useful signal late in training.

# %%
n, c = 8, 10
teacher = torch.randn(n, c)
for gap in (1.0, 0.1, 0.01, 0.001):
    student = (teacher + gap).requires_grad_(True)
    (g_abs,) = torch.autograd.grad(L.discrepancy_estimation_loss(teacher, student), student)
    student2 = student.detach().requires_grad_(True)
    (g_sq,) = torch.autograd.grad(((teacher - student2) ** 2).sum() / n, student2)
    print(f"gap {gap:<6} |grad| abs {g_abs.abs().mean():.4f}  squared {g_sq.abs().mean():.6f}")

# %% [markdown]
# Attention transfer compares normalized spatial energy maps, so it ignores
# how strongly a layer fires and only cares *where* it fires.

# %%
s = [torch.rand(2, 3, 8, 8)]
t = [torch.rand(2, 6, 8, 8)]
print(float(L.attention_transfer_loss(s, t)), float(L.attention_transfer_loss([5 * s[0]], [0.1 * t[0]])))
