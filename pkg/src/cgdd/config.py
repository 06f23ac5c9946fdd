"""Run configuration: schema, defaults, validation, ablation switches, manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .data import DATASET_REGISTRY
from .errors import ConfigError
from .losses import LossWeights, validate_distribution
from .models import ARCHITECTURES, GeneratorSpec
from .trainer import TeacherSchedule, TrainSchedule

log = logging.getLogger(__name__)

# Schedules reported for each dataset; cifar's two decay points are not
# given numerically, so they sit at 40% and 80% of training.
SCHEDULE_DEFAULTS = {
    "mnist": dict(epochs=60, steps_per_epoch=50, inner_student_steps=5, batch_size=512,
                  student_lr=0.01, generator_lr=1e-3, lr_decay_epochs=[50]),
    "cifar10": dict(epochs=250, steps_per_epoch=100, inner_student_steps=5, batch_size=256,
                    student_lr=0.1, generator_lr=1e-3, lr_decay_epochs=[100, 200]),
}

ARCH_DEFAULTS = {
    "mnist": ("lenet5", "lenet5_half"),
    "cifar10": ("resnet34", "resnet18"),
}

SWITCH_TO_WEIGHT = {
    "enable_CM": "lambda_CM",
    "enable_GT": "lambda_GT",
    "enable_AT": "lambda_AT",
    "enable_BN": "lambda_bn",
}

BN_WEIGHT_WHEN_ENABLED = 1.0


@dataclass
class Ablation:
    enable_CM: bool = True
    enable_GT: bool = True
    enable_AT: bool = True
    enable_BN: bool = False


@dataclass
class RunConfig:
    dataset: str = "mnist"
    teacher_arch: str = "lenet5"
    student_arch: str = "lenet5_half"
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    teacher_schedule: TeacherSchedule = field(default_factory=TeacherSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    label_distribution: Optional[List[float]] = None
    ablation: Ablation = field(default_factory=Ablation)
    output_dir: str = "runs"
    seed: int = 0
    defaulted: List[str] = field(default_factory=list, compare=False, repr=False)

    @property
    def num_classes(self) -> int:
        return self.generator.num_classes

    def effective_weights(self) -> LossWeights:
        """Loss weights with every disabled switch forcing its weight to 0."""
        changes = {}
        for switch, weight in SWITCH_TO_WEIGHT.items():
            if not getattr(self.ablation, switch):
                changes[weight] = 0.0
        if self.ablation.enable_BN and self.weights.lambda_bn == 0:
            changes["lambda_bn"] = BN_WEIGHT_WHEN_ENABLED
        return self.weights.replace(**changes)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "teacher_arch": self.teacher_arch,
            "student_arch": self.student_arch,
            "generator": self.generator.to_dict(),
            "schedule": self.schedule.to_dict(),
            "teacher_schedule": dict(vars(self.teacher_schedule)),
            "weights": self.weights.to_dict(),
            "label_distribution": None if self.label_distribution is None else list(self.label_distribution),
            "ablation": dict(vars(self.ablation)),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


_SECTIONS = {
    "generator": GeneratorSpec,
    "schedule": TrainSchedule,
    "teacher_schedule": TeacherSchedule,
    "weights": LossWeights,
    "ablation": Ablation,
}
_TOP_LEVEL = {f.name for f in fields(RunConfig)} - {"defaulted"}


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"override {dotted!r} descends into a non-section")
    d[keys[-1]] = value


def parse_overrides(pairs) -> Dict[str, Any]:
    """Turn ``["schedule.epochs=15", "seed=3"]`` into a nested dict (values parsed as YAML)."""
    out: Dict[str, Any] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        _set_path(out, key.strip(), yaml.safe_load(raw))
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(source=None, overrides=None) -> RunConfig:
    """Build a validated :class:`RunConfig` from a YAML file, a dict, or nothing.

    ``overrides`` is a nested dict or a list of ``key=value`` strings applied
    on top. Unset schedule fields take the dataset's defaults, unset loss
    weights take :class:`LossWeights` defaults; the dotted names of every
    defaulted loss weight are listed in ``config.defaulted`` and logged.
    """
    if source is None:
        raw: dict = {}
    elif isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
    if overrides:
        if not isinstance(overrides, dict):
            overrides = parse_overrides(overrides)
        raw = _merge(raw, overrides)

    _check_keys("config", raw, _TOP_LEVEL)
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{name} must be a mapping")
        _check_keys(name, section, {f.name for f in fields(cls)})

    dataset = raw.get("dataset", "mnist")
    if dataset not in DATASET_REGISTRY:
        raise ConfigError(f"unknown dataset {dataset!r}; known: {sorted(DATASET_REGISTRY)}")
    info = DATASET_REGISTRY[dataset]
    teacher_arch, student_arch = ARCH_DEFAULTS[dataset]
    teacher_arch = raw.get("teacher_arch", teacher_arch)
    student_arch = raw.get("student_arch", student_arch)
    for arch in (teacher_arch, student_arch):
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")

    seed = int(raw.get("seed", 0))
    channels = len(info["mean"])
    gen = {"num_classes": info["num_classes"], "image_shape": [channels, 32, 32]}
    gen.update(raw.get("generator") or {})
    sched = dict(SCHEDULE_DEFAULTS[dataset], seed=seed)
    given_sched = raw.get("schedule") or {}
    sched.update(given_sched)
    if "epochs" in given_sched and "lr_decay_epochs" not in given_sched:
        # a shortened (or lengthened) run keeps its decay points at the same fractions
        default_epochs = SCHEDULE_DEFAULTS[dataset]["epochs"]
        scaled = (math.floor(d * sched["epochs"] / default_epochs + 0.5) for d in sched["lr_decay_epochs"])
        sched["lr_decay_epochs"] = sorted({d for d in scaled if 1 <= d < sched["epochs"]})
    tsched = {"seed": seed}
    tsched.update(raw.get("teacher_schedule") or {})
    given_weights = raw.get("weights") or {}
    defaulted = [f"weights.{f.name}" for f in fields(LossWeights) if f.name not in given_weights]

    ablation = Ablation(**(raw.get("ablation") or {}))
    if ablation.enable_GT and not ablation.enable_CM:
        raise ConfigError(
            "enable_GT requires enable_CM: preset labels only supervise the student "
            "when the class-matching loss makes the generator honour them"
        )

    try:
        cfg = RunConfig(
            dataset=dataset,
            teacher_arch=teacher_arch,
            student_arch=student_arch,
            generator=GeneratorSpec(**gen),
            schedule=TrainSchedule(**sched),
            teacher_schedule=TeacherSchedule(**tsched),
            weights=LossWeights(**given_weights),
            label_distribution=raw.get("label_distribution"),
            ablation=ablation,
            output_dir=str(raw.get("output_dir", "runs")),
            seed=seed,
            defaulted=defaulted,
        )
    except TypeError as err:
        raise ConfigError(str(err)) from None
    if cfg.label_distribution is not None:
        cfg.label_distribution = [float(p) for p in cfg.label_distribution]
        if len(cfg.label_distribution) != cfg.num_classes:
            raise ConfigError(
                f"label_distribution has {len(cfg.label_distribution)} entries for {cfg.num_classes} classes"
            )
        validate_distribution(cfg.label_distribution)
    if defaulted:
        log.info("loss weights taken from defaults: %s", ", ".join(defaulted))
    return cfg


# ---------------------------------------------------------------------------
# run directories and manifests


def make_run_dir(base, config: RunConfig, now: Optional[datetime] = None) -> Path:
    """Create ``<base>/<UTC timestamp>-<hash prefix>``, suffixed if it already exists."""
    now = now or datetime.now(timezone.utc)
    stem = f"{now.strftime('%Y%m%dT%H%M%S')}-{config.config_hash()[:10]}"
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    for i in range(1000):
        path = base / (stem if i == 0 else f"{stem}-{i}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise ConfigError(f"could not create a fresh run directory under {base}")


def write_config_snapshot(run_dir, config: RunConfig) -> Path:
    path = Path(run_dir) / "config.yaml"
    atomic_write_text(path, config.to_yaml())
    return path


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    config_hash: str
    started: str
    finished: str
    metrics: Dict[str, Any]
    checkpoints: Dict[str, str]

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        atomic_write_text(path, json.dumps(vars(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        return cls(**json.loads((Path(run_dir) / "manifest.json").read_text()))
