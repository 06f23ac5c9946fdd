"""Command-line entry point: ``cgdd <subcommand> [flags]``.

Every subcommand writes under a fresh run directory inside ``--out`` (or the
config's ``output_dir``) and prints a one-line JSON summary on success. On
failure a JSON error record goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch
import yaml

from . import __version__
from .config import RunConfig, RunManifest, make_run_dir, parse_config, write_config_snapshot
from .data import load_eval_dataset, evaluate
from .errors import CGDDError, ConfigError, ContractError
from .losses import MetricsReport
from .models import load_checkpoint, save_checkpoint
from .trainer import CandidateSetting, run_distillation, talent_select, train_teacher
from .viz import dump_image_grid, export_attention_heatmaps

log = logging.getLogger("cgdd")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = parse_config(args.config, overrides)
    if args.out:
        cfg.output_dir = args.out
    return cfg


def _run_dir(cfg: RunConfig) -> Path:
    run_dir = make_run_dir(cfg.output_dir, cfg)
    write_config_snapshot(run_dir, cfg)
    return run_dir


def _require(path, what: str):
    if not path:
        raise ContractError(f"{what} required: pass --{what}-ckpt")
    if not Path(path).exists():
        raise ContractError(f"{what} {path} does not exist")
    return load_checkpoint(path)


def _test_set(cfg: RunConfig):
    return load_eval_dataset(cfg.dataset, split="test")


# ---------------------------------------------------------------------------


def cmd_train_teacher(args) -> dict:
    cfg = _load_config(args)
    train = load_eval_dataset(cfg.dataset, split="train")
    test = _test_set(cfg)
    started = _now()
    run_dir = _run_dir(cfg)
    model, acc = train_teacher(cfg.teacher_arch, train, cfg.teacher_schedule, test, cfg.num_classes)
    ckpt = run_dir / "teacher.safetensors"
    save_checkpoint(model, ckpt, {"test_accuracy": acc})
    RunManifest(cfg.config_hash(), started, _now(), {"teacher_accuracy": acc}, {"teacher": str(ckpt)}).write(run_dir)
    return {"run_dir": str(run_dir), "teacher_ckpt": str(ckpt), "T_acc": acc}


def _distill(cfg: RunConfig, teacher, test, run_dir):
    t_acc = evaluate(teacher, test)
    student, generator, state = run_distillation(
        teacher,
        cfg.generator,
        cfg.schedule,
        cfg.effective_weights(),
        student_arch=cfg.student_arch,
        label_distribution=cfg.label_distribution,
        evaluator=lambda s: evaluate(s, test),
        teacher_accuracy=t_acc,
        run_dir=run_dir,
    )
    return t_acc, student, generator, state


def cmd_distill(args) -> dict:
    cfg = _load_config(args)
    teacher = _require(args.teacher_ckpt, "teacher")
    test = _test_set(cfg)
    torch.set_num_threads(1) if args.single_threaded else None
    started = _now()
    run_dir = _run_dir(cfg)
    t_acc, student, _, state = _distill(cfg, teacher, test, run_dir)
    s_acc = evaluate(student, test)
    report = MetricsReport(t_acc, s_acc)
    checkpoints = {p.stem: str(p) for p in sorted(run_dir.glob("*.safetensors"))}
    metrics = dict(report.to_dict(), generator_updates=state.generator_updates,
                   student_updates=state.student_updates, real_images_seen=state.real_images_seen)
    RunManifest(cfg.config_hash(), started, _now(), metrics, checkpoints).write(run_dir)
    return {"run_dir": str(run_dir), "T_acc": t_acc, "S_acc": s_acc, "Rel_acc": report.relative_accuracy}


def cmd_evaluate(args) -> dict:
    cfg = _load_config(args)
    teacher = _require(args.teacher_ckpt, "teacher")
    test = _test_set(cfg)
    out = {"T_acc": evaluate(teacher, test)}
    if args.student_ckpt:
        student = _require(args.student_ckpt, "student")
        report = MetricsReport(out["T_acc"], evaluate(student, test))
        out.update(S_acc=report.student_accuracy, Rel_acc=report.relative_accuracy)
    return out


def _read_candidates(path, cfg: RunConfig):
    if not path:
        raise ConfigError("select needs --candidates FILE (a YAML list of candidate overrides)")
    items = yaml.safe_load(Path(path).read_text()) or []
    if not isinstance(items, list):
        raise ConfigError(f"{path} must hold a list of candidates")
    base = cfg.to_dict()
    out = []
    for i, item in enumerate(items):
        item = dict(item or {})
        ident = str(item.pop("id", f"candidate-{i}"))
        c = parse_config(base, item)
        out.append((CandidateSetting(ident, c.effective_weights(), c.schedule), c))
    return out


def cmd_select(args) -> dict:
    cfg = _load_config(args)
    teacher = _require(args.teacher_ckpt, "teacher")
    test = _test_set(cfg)
    pairs = _read_candidates(args.candidates, cfg)
    by_id = {cand.identifier: c for cand, c in pairs}
    run_dir = _run_dir(cfg)
    t_acc = evaluate(teacher, test)

    def eval_fn(cand: CandidateSetting):
        c = by_id[cand.identifier]
        student, _, state = run_distillation(
            teacher, c.generator, cand.schedule, cand.weights, student_arch=c.student_arch,
            label_distribution=c.label_distribution, evaluator=lambda s: evaluate(s, test),
            teacher_accuracy=t_acc, run_dir=run_dir / cand.identifier,
        )
        return state.history[-1]["relative_accuracy"], state.history

    report = talent_select([cand for cand, _ in pairs], args.budget_epochs, eval_fn)
    ranking = [
        {"rank": r.rank, "id": r.candidate.identifier, "relative_accuracy": r.score,
         "diverged": r.diverged, "budget_epochs": r.budget_schedule.epochs,
         "lr_decay_epochs": list(r.budget_schedule.lr_decay_epochs)}
        for r in report.ranking
    ]
    (run_dir / "selection.json").write_text(json.dumps(
        {"ranking": ranking, "recommended": [r.candidate.identifier for r in report.recommended]}, indent=2))
    return {"run_dir": str(run_dir), "ranking": ranking}


def cmd_dump_images(args) -> dict:
    cfg = _load_config(args)
    generator = _require(args.generator_ckpt, "generator")
    run_dir = _run_dir(cfg)
    path = dump_image_grid(generator, run_dir / "synthetic_grid.png", rows=args.rows, seed=cfg.seed)
    return {"run_dir": str(run_dir), "image": str(path)}


def cmd_dump_attention(args) -> dict:
    cfg = _load_config(args)
    teacher = _require(args.teacher_ckpt, "teacher")
    student = _require(args.student_ckpt, "student")
    test = _test_set(cfg)
    run_dir = _run_dir(cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    idx = torch.randperm(len(test), generator=g)[: args.num_images]
    bundles = export_attention_heatmaps(teacher, student, test.images[idx], run_dir / "attention",
                                        mean=test.mean, std=test.std)
    return {"run_dir": str(run_dir), "heatmaps": sum(len(b.paths) for b in bundles)}


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "select": cmd_select,
    "dump-images": cmd_dump_images,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgdd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="base directory for run directories")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, e.g. schedule.epochs=15 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("distill", "evaluate", "select", "dump-attention"):
            p.add_argument("--teacher-ckpt")
        if name in ("evaluate", "dump-attention"):
            p.add_argument("--student-ckpt")
        if name == "distill":
            p.add_argument("--single-threaded", action="store_true")
        if name == "select":
            p.add_argument("--candidates", help="YAML list of candidate overrides")
            p.add_argument("--budget-epochs", type=int, required=True)
        if name == "dump-images":
            p.add_argument("--generator-ckpt")
            p.add_argument("--rows", type=int, default=8)
        if name == "dump-attention":
            p.add_argument("--num-images", type=int, default=4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (CGDDError, FileNotFoundError) as err:
        code = getattr(err, "code", "io_error")
        print(json.dumps({"error": code, "message": str(err), "command": args.command}), file=sys.stderr)
        return 2
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
