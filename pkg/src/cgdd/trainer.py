"""Alternating generator / student training, teacher pre-training and talent selection."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import EvalDataset, evaluate, require_training_role
from .errors import ConfigError, DivergenceError, NumericError, RoleError
from .losses import LossWeights, distillation_loss_terms, generator_loss_terms, relative_accuracy
from .models import (
    Classifier,
    ConditionalGenerator,
    GeneratorSpec,
    bn_statistics_penalty,
    build_classifier,
    classify,
    freeze,
    generate,
    sample_conditioned_noise,
    save_checkpoint,
    uniform_distribution,
)

log = logging.getLogger(__name__)


def derive_seed(seed: int, component: str) -> int:
    """Independent 63-bit seed for ``component`` derived from the run seed."""
    key = int.from_bytes(hashlib.sha256(component.encode()).digest()[:4], "big")
    return int(np.random.SeedSequence(int(seed), spawn_key=(key,)).generate_state(2, np.uint64)[0] >> 1)


@contextlib.contextmanager
def seeded(seed: int):
    """Seed torch's global RNG inside the block without disturbing the caller's stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 60
    steps_per_epoch: int = 50
    inner_student_steps: int = 5
    batch_size: int = 512
    student_lr: float = 0.01
    generator_lr: float = 1e-3
    lr_decay_epochs: Tuple[int, ...] = (50,)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0, steps_per_epoch and batch_size >= 1")
        if self.inner_student_steps < 1:
            raise ConfigError("inner_student_steps (k) must be >= 1")
        for name in ("student_lr", "generator_lr", "lr_decay_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be >= 0")
        decay = self.lr_decay_epochs
        if any(b <= a for a, b in zip(decay, decay[1:])):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing, got {decay}")
        if decay and (decay[0] < 1 or decay[-1] >= max(self.epochs, 1)):
            raise ConfigError(f"lr_decay_epochs {decay} must lie in [1, epochs={self.epochs})")

    def replace(self, **changes) -> "TrainSchedule":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


@dataclass
class RunState:
    epoch: int = 0
    generator_updates: int = 0
    student_updates: int = 0
    real_images_seen: int = 0
    history: List[dict] = field(default_factory=list)


def _mean_trace(traces: Sequence[Dict[str, float]]) -> Dict[str, float]:
    return {k: float(np.mean([t[k] for t in traces])) for k in traces[0]} if traces else {}


def _check_finite(terms: Dict[str, torch.Tensor], where: str, state=None) -> Dict[str, float]:
    trace = {k: float(v.detach()) for k, v in terms.items()}
    bad = [k for k, v in trace.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite {', '.join(bad)} in {where}", trace, state)
    return trace


@contextlib.contextmanager
def _as_divergence(where: str, state=None):
    # non-finite network outputs mid-run are a divergence, not a caller error
    try:
        yield
    except NumericError as err:
        raise DivergenceError(f"{err} in {where}", {"error": str(err)}, state) from err


@contextlib.contextmanager
def _preserved_buffers(module: torch.nn.Module):
    saved = [(b, b.detach().clone()) for b in module.buffers()]
    try:
        yield
    finally:
        with torch.no_grad():
            for b, value in saved:
                b.copy_(value)


class Distiller:
    """Holds the three networks, their optimizers and the noise stream of one run.

    The teacher is frozen on construction. :meth:`generator_step` updates only
    the generator, :meth:`student_step` only the student; images fed to either
    network come exclusively from the generator.
    """

    def __init__(
        self,
        teacher: Classifier,
        student: Classifier,
        generator: ConditionalGenerator,
        schedule: TrainSchedule = TrainSchedule(),
        weights: LossWeights = LossWeights(),
        label_distribution=None,
    ):
        for obj in (teacher, student, generator):
            if isinstance(obj, EvalDataset):
                raise RoleError("datasets never enter the distillation loop; evaluate through a callback")
        self.teacher = freeze(teacher)
        self.student = student
        self.generator = generator
        self.schedule = schedule
        self.weights = weights
        c = generator.spec.num_classes
        if label_distribution is None:
            label_distribution = uniform_distribution(c)
        self.label_distribution = torch.as_tensor(label_distribution, dtype=torch.float64)
        if self.label_distribution.numel() != c or teacher.num_classes != c or student.num_classes != c:
            raise ConfigError("teacher, student, generator and label distribution disagree on class count")
        self.noise_rng = torch.Generator().manual_seed(derive_seed(schedule.seed, "noise"))
        self.opt_student = torch.optim.SGD(
            student.parameters(),
            lr=schedule.student_lr,
            momentum=schedule.momentum,
            weight_decay=schedule.weight_decay,
        )
        self.opt_generator = torch.optim.Adam(generator.parameters(), lr=schedule.generator_lr)
        self.sched_student = torch.optim.lr_scheduler.MultiStepLR(
            self.opt_student, list(schedule.lr_decay_epochs), schedule.lr_decay_factor
        )
        self.sched_generator = torch.optim.lr_scheduler.MultiStepLR(
            self.opt_generator, list(schedule.lr_decay_epochs), schedule.lr_decay_factor
        )
        self.state = RunState()

    # -- sampling ---------------------------------------------------------

    def sample(self, n: Optional[int] = None):
        return sample_conditioned_noise(
            n or self.schedule.batch_size,
            self.generator.spec.noise_dim,
            self.label_distribution,
            self.noise_rng,
        )

    def _synthesize(self, batch) -> torch.Tensor:
        images = generate(self.generator, batch)
        self._last_synthetic = images
        return images

    def _account(self, images: torch.Tensor) -> None:
        # anything other than the batch just produced by the generator is real data
        if images is not getattr(self, "_last_synthetic", None):
            self.state.real_images_seen += int(images.shape[0])

    # -- the two updates ---------------------------------------------------

    def generator_step(self, batch=None) -> Dict[str, float]:
        """One Adam step on the generator objective; the student is held fixed."""
        w = self.weights
        student_mode = self.student.training
        self.generator.train()
        self.student.eval()
        try:
            batch = batch if batch is not None else self.sample()
            images = self._synthesize(batch)
            self._account(images)
            t = classify(self.teacher, images, capture_bn=w.lambda_bn > 0)
            s = classify(self.student, images)
            bn = bn_statistics_penalty(t, self.teacher) if w.lambda_bn > 0 else 0.0
            with _as_divergence("generator step", self.state):
                terms = generator_loss_terms(t.logits, s.logits, batch.labels, w, bn)
            trace = _check_finite(terms, "generator step", self.state)
            self.opt_generator.zero_grad(set_to_none=True)
            terms["L_G"].backward(inputs=list(self.generator.parameters()))
            self.opt_generator.step()
        finally:
            self.student.train(student_mode)
        self.state.generator_updates += 1
        return trace

    def student_step(self, batch=None) -> Dict[str, float]:
        """One momentum-SGD step on the distillation objective; the generator is held fixed."""
        self.student.train()
        self.generator.train()
        batch = batch if batch is not None else self.sample()
        with torch.no_grad(), _preserved_buffers(self.generator):
            images = self._synthesize(batch)
            self._account(images)
            t = classify(self.teacher, images)
        s = classify(self.student, images)
        with _as_divergence("student step", self.state):
            terms = distillation_loss_terms(
                t.logits, s.logits, batch.labels, s.attention_maps, t.attention_maps, self.weights
            )
        trace = _check_finite(terms, "student step", self.state)
        self.opt_student.zero_grad(set_to_none=True)
        terms["L_KD"].backward()
        self.opt_student.step()
        self.state.student_updates += 1
        return trace

    # -- epochs ------------------------------------------------------------

    def train_epoch(self) -> Dict[str, float]:
        g_traces, s_traces = [], []
        for _ in range(self.schedule.steps_per_epoch):
            g_traces.append(self.generator_step())
            for _ in range(self.schedule.inner_student_steps):
                s_traces.append(self.student_step())
        g = _mean_trace(g_traces)
        s = _mean_trace(s_traces)
        record = {"epoch": self.state.epoch + 1}
        record.update({("L_DE_G" if k == "L_DE" else k): v for k, v in g.items()})
        record.update(s)
        record["lr_student"] = self.opt_student.param_groups[0]["lr"]
        record["lr_generator"] = self.opt_generator.param_groups[0]["lr"]
        self.sched_student.step()
        self.sched_generator.step()
        self.state.epoch += 1
        return record

    def fit(
        self,
        evaluator: Optional[Callable[[Classifier], float]] = None,
        teacher_accuracy: Optional[float] = None,
        callbacks: Sequence[Callable[["Distiller", dict], None]] = (),
        run_dir=None,
    ) -> RunState:
        """Train for ``schedule.epochs`` epochs.

        ``evaluator`` maps the student to an accuracy once per epoch; with
        ``teacher_accuracy`` the relative accuracy is recorded too. With
        ``run_dir`` set, per-epoch records go to ``metrics.jsonl`` and
        checkpoints are written at decay epochs, at the end, and on divergence.
        """
        run_dir = Path(run_dir) if run_dir is not None else None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
        while self.state.epoch < self.schedule.epochs:
            try:
                record = self.train_epoch()
            except DivergenceError as err:
                err.state = self.state
                if run_dir is not None:
                    self.save(run_dir, "diverged")
                raise
            if evaluator is not None:
                acc = float(evaluator(self.student))
                record.update(split="test", accuracy=acc)
                if teacher_accuracy:
                    record["relative_accuracy"] = relative_accuracy(teacher_accuracy, acc)
            self.state.history.append(record)
            log.info("epoch %d: %s", record["epoch"], {k: round(v, 4) for k, v in record.items() if isinstance(v, float)})
            if run_dir is not None:
                with open(run_dir / "metrics.jsonl", "a") as f:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
                if record["epoch"] in self.schedule.lr_decay_epochs:
                    self.save(run_dir, f"epoch{record['epoch']}")
            for cb in callbacks:
                cb(self, record)
        if run_dir is not None:
            self.save(run_dir, "final")
        return self.state

    def save(self, run_dir, tag: str) -> Dict[str, str]:
        run_dir = Path(run_dir)
        paths = {
            "student": str(run_dir / f"student_{tag}.safetensors"),
            "generator": str(run_dir / f"generator_{tag}.safetensors"),
        }
        save_checkpoint(self.student, paths["student"], {"epoch": self.state.epoch, "tag": tag})
        save_checkpoint(self.generator, paths["generator"], {"epoch": self.state.epoch, "tag": tag})
        return paths


def run_distillation(
    teacher: Classifier,
    generator_spec: GeneratorSpec,
    schedule: TrainSchedule = TrainSchedule(),
    weights: LossWeights = LossWeights(),
    student_arch: str = "lenet5_half",
    label_distribution=None,
    evaluator: Optional[Callable[[Classifier], float]] = None,
    teacher_accuracy: Optional[float] = None,
    callbacks: Sequence[Callable] = (),
    run_dir=None,
    student: Optional[Classifier] = None,
):
    """Build a fresh student and generator from the run seed and distill ``teacher`` into it.

    Returns ``(student, generator, state)``.
    """
    for obj in (teacher, generator_spec, schedule, weights, student_arch, label_distribution, student):
        if isinstance(obj, EvalDataset):
            raise RoleError("datasets never enter the distillation loop; evaluate through `evaluator`")
    with seeded(derive_seed(schedule.seed, "init")):
        if student is None:
            student = build_classifier(
                student_arch, num_classes=teacher.num_classes, in_channels=generator_spec.image_shape[0]
            )
        generator = ConditionalGenerator(generator_spec)
    distiller = Distiller(teacher, student, generator, schedule, weights, label_distribution)
    state = distiller.fit(evaluator, teacher_accuracy, callbacks, run_dir)
    return student, generator, state


# ---------------------------------------------------------------------------
# teacher pre-training


@dataclass(frozen=True)
class TeacherSchedule:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("teacher schedule needs epochs >= 0, batch_size >= 1, lr > 0")


def train_teacher(
    arch_id: str,
    dataset: EvalDataset,
    schedule: TeacherSchedule = TeacherSchedule(),
    eval_dataset: Optional[EvalDataset] = None,
    num_classes: Optional[int] = None,
):
    """Supervised training on real data. Returns ``(model, test_accuracy or None)``.

    This is the only routine that reads real training images.
    """
    require_training_role(dataset)
    num_classes = num_classes or int(dataset.labels.max()) + 1
    with seeded(derive_seed(schedule.seed, "teacher-init")):
        model = build_classifier(arch_id, num_classes=num_classes, in_channels=dataset.image_shape[0])
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    rng = torch.Generator().manual_seed(derive_seed(schedule.seed, "teacher-shuffle"))
    model.train()
    for epoch in range(schedule.epochs):
        order = torch.randperm(len(dataset), generator=rng)
        for start in range(0, len(dataset), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss = F.cross_entropy(model(dataset.images[idx]), dataset.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        log.info("teacher epoch %d loss %.4f", epoch + 1, float(loss.detach()))
    model.eval()
    accuracy = evaluate(model, eval_dataset) if eval_dataset is not None else None
    return model, accuracy


# ---------------------------------------------------------------------------
# talent selection


@dataclass(frozen=True)
class CandidateSetting:
    identifier: str
    weights: LossWeights = LossWeights()
    schedule: TrainSchedule = TrainSchedule()


@dataclass
class SelectionResult:
    candidate: CandidateSetting
    budget_schedule: TrainSchedule
    score: float
    diverged: bool = False
    trace: list = field(default_factory=list)
    rank: int = 0


@dataclass
class SelectionReport:
    ranking: List[SelectionResult]
    recommended: List[SelectionResult]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def budget_schedule(
    schedule: TrainSchedule, budget_epochs: int, decay_ratio: Optional[float] = None
) -> TrainSchedule:
    """Shrink ``schedule`` to ``budget_epochs`` and move its decay points proportionally.

    With ``decay_ratio`` all decays collapse into one at ``ratio * budget``
    (e.g. a 200-epoch, two-decay schedule screened for 50 epochs with a single
    change at epoch 40 uses ``decay_ratio=0.8``).
    """
    if budget_epochs < 1:
        raise ConfigError("budget_epochs must be >= 1")
    if decay_ratio is not None:
        points = [_round_half_up(decay_ratio * budget_epochs)]
    else:
        points = [_round_half_up(d * budget_epochs / schedule.epochs) for d in schedule.lr_decay_epochs]
    decay = tuple(sorted({p for p in points if 1 <= p < budget_epochs}))
    return schedule.replace(epochs=budget_epochs, lr_decay_epochs=decay)


def talent_select(
    candidates: Sequence[CandidateSetting],
    budget_epochs: int,
    eval_fn: Callable[[CandidateSetting], object],
    decay_ratio: Optional[float] = None,
    n_recommend: int = 3,
) -> SelectionReport:
    """Screen candidates on a short budget and rank them by score, best first.

    ``eval_fn`` receives each candidate with its budget schedule and returns
    either a score (relative accuracy) or a ``(score, trace)`` pair. A
    candidate whose run raises :class:`DivergenceError` or returns a non-finite
    score is flagged and ranked last.
    """
    if not candidates:
        raise ConfigError("talent selection needs at least one candidate")
    results = []
    for cand in candidates:
        if budget_epochs >= cand.schedule.epochs:
            raise ConfigError(
                f"budget {budget_epochs} must be shorter than the full schedule ({cand.schedule.epochs} epochs)"
            )
        sched = budget_schedule(cand.schedule, budget_epochs, decay_ratio)
        screened = replace(cand, schedule=sched)
        try:
            out = eval_fn(screened)
            score, trace = out if isinstance(out, tuple) else (out, [])
            score = float(score)
            diverged = not math.isfinite(score)
        except DivergenceError as err:
            score, trace, diverged = float("nan"), [err.trace], True
        results.append(SelectionResult(cand, sched, score, diverged, list(trace)))
    results.sort(key=lambda r: (r.diverged, -r.score if not r.diverged else 0.0))
    for i, r in enumerate(results, 1):
        r.rank = i
    healthy = [r for r in results if not r.diverged]
    n = min(max(2, n_recommend), 4, len(healthy))
    return SelectionReport(results, healthy[:n])
