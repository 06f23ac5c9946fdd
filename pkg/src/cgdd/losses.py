"""Loss terms and metrics for conditional generative data-free distillation.

Every function here is a pure function of its tensor inputs and is
differentiable through autograd, so each term can be used alone or inside
the composite generator / distillation objectives.

Naming of the composite terms follows the training loop:

* generator objective:    ``-L_DE + lambda_US * L_US + lambda_CM * L_CM (+ lambda_BN * L_BN)``
* distillation objective: `` L_DE + lambda_GT * L_GT + lambda_AT * L_AT``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NumericError, UndefinedMetricError

EPS = 1e-8

__all__ = [
    "EPS",
    "LossWeights",
    "PresetLabelBatch",
    "MetricsReport",
    "class_matching_loss",
    "information_entropy_loss",
    "one_hot_loss",
    "unsupervised_loss",
    "discrepancy_estimation_loss",
    "generator_loss",
    "ground_truth_loss",
    "attention_energy",
    "attention_vector",
    "attention_transfer_loss",
    "distillation_loss",
    "relative_accuracy",
]


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights of the two composite objectives.

    ``lambda_bn`` weighs the batch-norm statistics penalty; it is 0 (off) by
    default. The remaining defaults are starting points for talent selection.
    """

    lambda_ie: float = 5.0
    lambda_US: float = 1.0
    lambda_CM: float = 1.0
    lambda_GT: float = 1.0
    lambda_AT: float = 2.0
    lambda_bn: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{f.name} must be finite and >= 0, got {value!r}")

    def replace(self, **changes) -> "LossWeights":
        return LossWeights(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PresetLabelBatch:
    """Labels drawn before generation together with the distribution they came from."""

    labels: torch.Tensor
    source_distribution: torch.Tensor

    def __post_init__(self):
        dist = torch.as_tensor(self.source_distribution, dtype=torch.float64)
        validate_distribution(dist)
        labels = torch.as_tensor(self.labels)
        if labels.dim() != 1:
            raise DimensionError(f"labels must be a vector, got shape {tuple(labels.shape)}")
        if labels.numel() and (labels.min() < 0 or labels.max() >= dist.numel()):
            raise DimensionError(f"labels must lie in [0, {dist.numel() - 1}]")

    @property
    def num_classes(self) -> int:
        return int(torch.as_tensor(self.source_distribution).numel())

    def __len__(self):
        return int(self.labels.numel())


@dataclass(frozen=True)
class MetricsReport:
    teacher_accuracy: float
    student_accuracy: float

    @property
    def relative_accuracy(self) -> float:
        return relative_accuracy(self.teacher_accuracy, self.student_accuracy)

    def to_dict(self) -> dict:
        return {
            "teacher_accuracy": self.teacher_accuracy,
            "student_accuracy": self.student_accuracy,
            "relative_accuracy": self.relative_accuracy,
        }


def validate_distribution(dist: torch.Tensor, tol: float = 1e-9) -> None:
    dist = torch.as_tensor(dist, dtype=torch.float64)
    if dist.dim() != 1 or dist.numel() < 2:
        raise ConfigError("label distribution must be a vector over at least 2 classes")
    if not torch.isfinite(dist).all() or (dist < 0).any():
        raise ConfigError("label distribution entries must be finite and non-negative")
    total = float(dist.sum())
    if abs(total - 1.0) > tol:
        raise ConfigError(f"label distribution must sum to 1 (got {total!r})")


# ---------------------------------------------------------------------------
# input checks


def _check_logits(logits: torch.Tensor, name: str = "logits") -> torch.Tensor:
    if not isinstance(logits, torch.Tensor):
        logits = torch.as_tensor(logits, dtype=torch.get_default_dtype())
    if logits.dim() != 2:
        raise DimensionError(f"{name} must be [n x c], got shape {tuple(logits.shape)}")
    n, c = logits.shape
    if n < 1 or c < 2:
        raise DimensionError(f"{name} needs n >= 1 and c >= 2, got {n} x {c}")
    if not torch.isfinite(logits).all():
        raise NumericError(f"{name} contains non-finite values")
    return logits


def _check_labels(labels, logits: torch.Tensor) -> torch.Tensor:
    if isinstance(labels, PresetLabelBatch):
        if labels.num_classes != logits.shape[1]:
            raise DimensionError(
                f"labels drawn over {labels.num_classes} classes, logits have {logits.shape[1]}"
            )
        labels = labels.labels
    labels = torch.as_tensor(labels, device=logits.device).long()
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"expected {logits.shape[0]} labels, got shape {tuple(labels.shape)}"
        )
    if (labels < 0).any() or (labels >= logits.shape[1]).any():
        raise DimensionError(f"labels must lie in [0, {logits.shape[1] - 1}]")
    return labels


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    a = _check_logits(a, "teacher_logits")
    b = _check_logits(b, "student_logits")
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


# ---------------------------------------------------------------------------
# generator-side terms


def class_matching_loss(teacher_logits, labels) -> torch.Tensor:
    """Mean cross-entropy between the teacher's softmax and the preset labels."""
    logits = _check_logits(teacher_logits, "teacher_logits")
    return F.cross_entropy(logits, _check_labels(labels, logits))


def information_entropy_loss(teacher_logits) -> torch.Tensor:
    """Negative entropy of the batch-averaged teacher prediction, scaled by 1/c.

    Lies in ``[-(ln c)/c, 0]``; the minimum is reached when the averaged
    softmax is uniform, i.e. the batch is class balanced.
    """
    logits = _check_logits(teacher_logits, "teacher_logits")
    p_mean = F.softmax(logits, dim=1).mean(dim=0)
    # clamping keeps 0 * log 0 at exactly 0
    return (p_mean * torch.log(p_mean.clamp_min(EPS))).sum() / logits.shape[1]


def one_hot_loss(teacher_logits) -> torch.Tensor:
    """Cross-entropy of the teacher against its own argmax (ties go to the lowest index)."""
    logits = _check_logits(teacher_logits, "teacher_logits")
    # torch.argmax returns the first maximal index
    pseudo = logits.detach().argmax(dim=1)
    return F.cross_entropy(logits, pseudo)


def unsupervised_loss(teacher_logits, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return one_hot_loss(teacher_logits) + weights.lambda_ie * information_entropy_loss(teacher_logits)


def discrepancy_estimation_loss(teacher_logits, student_logits) -> torch.Tensor:
    """Batch mean of the per-sample L1 distance between raw teacher and student logits."""
    t, s = _check_pair(teacher_logits, student_logits)
    return (t - s).abs().sum() / t.shape[0]


def generator_loss(
    teacher_logits,
    student_logits,
    labels,
    weights: LossWeights = LossWeights(),
    bn_penalty=0.0,
) -> torch.Tensor:
    return generator_loss_terms(teacher_logits, student_logits, labels, weights, bn_penalty)["L_G"]


def generator_loss_terms(teacher_logits, student_logits, labels, weights=LossWeights(), bn_penalty=0.0):
    """All components of the generator objective, keyed by their trace names."""
    de = discrepancy_estimation_loss(teacher_logits, student_logits)
    oh = one_hot_loss(teacher_logits)
    ie = information_entropy_loss(teacher_logits)
    us = oh + weights.lambda_ie * ie
    cm = class_matching_loss(teacher_logits, labels)
    bn = torch.as_tensor(bn_penalty, dtype=de.dtype, device=de.device)
    if bn.dim() != 0 or not torch.isfinite(bn) or bn < 0:
        raise NumericError("bn_penalty must be a finite non-negative scalar")
    total = -de + weights.lambda_US * us + weights.lambda_CM * cm + weights.lambda_bn * bn
    return {"L_G": total, "L_DE": de, "L_oh": oh, "L_ie": ie, "L_US": us, "L_CM": cm, "L_BN": bn}


# ---------------------------------------------------------------------------
# student-side terms


def ground_truth_loss(student_logits, labels) -> torch.Tensor:
    """Mean cross-entropy between the student's softmax and the preset labels."""
    logits = _check_logits(student_logits, "student_logits")
    return F.cross_entropy(logits, _check_labels(labels, logits))


def attention_energy(activation: torch.Tensor) -> torch.Tensor:
    """Sum of squared activations over the channel axis.

    Accepts a single map ``[C, H, W]`` (returns ``[H, W]``) or a batch
    ``[N, C, H, W]`` (returns ``[N, H, W]``).
    """
    if activation.dim() not in (3, 4) or min(activation.shape) < 1:
        raise DimensionError(
            f"attention map must be [C, H, W] or [N, C, H, W], got {tuple(activation.shape)}"
        )
    if not torch.isfinite(activation).all():
        raise NumericError("attention map contains non-finite values")
    return activation.pow(2).sum(dim=-3)


def attention_vector(energy: torch.Tensor) -> torch.Tensor:
    """Flatten ``[..., H, W]`` energies and scale each to unit L2 norm (eps-guarded)."""
    q = energy.flatten(start_dim=-2)
    return q / torch.linalg.vector_norm(q, dim=-1, keepdim=True).clamp_min(EPS)


def _match_grids(e_s: torch.Tensor, e_t: torch.Tensor):
    hs, ws = e_s.shape[-2:]
    ht, wt = e_t.shape[-2:]
    if (hs, ws) == (ht, wt):
        return e_s, e_t
    size = (min(hs, ht), min(ws, wt))

    def pool(e):
        if tuple(e.shape[-2:]) == size:
            return e
        batched = e if e.dim() == 3 else e.unsqueeze(0)
        out = F.adaptive_avg_pool2d(batched.unsqueeze(1), size).squeeze(1)
        return out if e.dim() == 3 else out.squeeze(0)

    return pool(e_s), pool(e_t)


def attention_transfer_loss(
    student_maps: Sequence[torch.Tensor], teacher_maps: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Sum over tap points of the L2 distance between normalized attention vectors.

    Batched maps give one distance per sample; those are averaged over the
    batch before summing over tap points. Pairs whose spatial grids differ are
    average-pooled onto the smaller grid.
    """
    student_maps, teacher_maps = list(student_maps), list(teacher_maps)
    if len(student_maps) != len(teacher_maps):
        raise DimensionError(
            f"{len(student_maps)} student maps vs {len(teacher_maps)} teacher maps"
        )
    if not student_maps:
        raise DimensionError("attention transfer needs at least one map pair")
    total = None
    for a_s, a_t in zip(student_maps, teacher_maps):
        if a_s.dim() != a_t.dim() or (a_s.dim() == 4 and a_s.shape[0] != a_t.shape[0]):
            raise DimensionError(
                f"map pair shapes are incompatible: {tuple(a_s.shape)} vs {tuple(a_t.shape)}"
            )
        e_s, e_t = _match_grids(attention_energy(a_s), attention_energy(a_t))
        dist = torch.linalg.vector_norm(attention_vector(e_s) - attention_vector(e_t), dim=-1)
        term = dist.mean() if dist.dim() else dist
        total = term if total is None else total + term
    return total


def distillation_loss(
    teacher_logits,
    student_logits,
    labels,
    student_maps,
    teacher_maps,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    return distillation_loss_terms(
        teacher_logits, student_logits, labels, student_maps, teacher_maps, weights
    )["L_KD"]


def distillation_loss_terms(
    teacher_logits, student_logits, labels, student_maps, teacher_maps, weights=LossWeights()
):
    de = discrepancy_estimation_loss(teacher_logits, student_logits)
    zero = de.new_zeros(())
    # switched-off terms are skipped, which also keeps the inner loop cheap
    gt = ground_truth_loss(student_logits, labels) if weights.lambda_GT > 0 else zero
    at = attention_transfer_loss(student_maps, teacher_maps) if weights.lambda_AT > 0 else zero
    total = de + weights.lambda_GT * gt + weights.lambda_AT * at
    return {"L_KD": total, "L_DE": de, "L_GT": gt, "L_AT": at}


# ---------------------------------------------------------------------------
# metrics


def relative_accuracy(teacher_accuracy: float, student_accuracy: float) -> float:
    """Student accuracy as a percentage of teacher accuracy."""
    if not teacher_accuracy > 0:
        raise UndefinedMetricError("relative accuracy is undefined for teacher accuracy 0")
    return 100.0 * student_accuracy / teacher_accuracy
