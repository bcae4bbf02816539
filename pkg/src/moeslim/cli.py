"""Command-line surface tying the pipeline together.

One subcommand per pipeline step; `pipeline` runs a whole compression arm from
a RunConfig JSON. Exit code 0 on success; failures print a single
machine-readable JSON line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .distill import (
    DistillConfig,
    cache_teacher_topk,
    load_teacher_cache,
    run_training,
    save_teacher_cache,
)
from .evals import MetricRow, emit_report, expert_similarity, write_similarity_json
from .model import ModelConfig, active_param_count
from .pruning import (
    NEURON_GRANULE,
    decide_drop_experts,
    decide_prune_groups,
    decide_slim_experts,
    decide_slim_ffn,
    drop_experts,
    expert_level_scores,
    gqa_group_scores,
    neuron_scores,
    param_sensitivity,
    prune_gqa_groups,
    sample_calibration,
    slim_dense_ffn,
    slim_experts,
    target_dim,
)
from .schedule import (
    StageSpec,
    cubic_mask_schedule,
    effective_topk,
    geometric_plan,
    run_iterative,
    run_multistage,
    run_oneshot,
    train_teacher,
    write_metrics_csv,
    write_run_manifest,
)
from .tasks import TaskSpec, gen_synthetic_corpus, load_corpus, save_corpus

ARMS = ("multistage", "oneshot", "iterative")


class CliError(ValueError):
    pass


@dataclass
class RunConfig:
    """Fully determines a run together with the code version."""
    task: TaskSpec
    model: ModelConfig
    distill: dict = field(default_factory=dict)  # DistillConfig overrides (no total_steps)
    teacher_steps: int = 400
    plan: dict = field(default_factory=dict)     # alpha, T, total_tokens, overrides, init_share
    iterative: dict = field(default_factory=dict)  # mask_phase_tokens, n_updates
    seeds: dict = field(default_factory=lambda: {"teacher": 0, "student": 0})
    calib_count: int = 64
    score_loss: str = "kd_topk"
    dtype: str = "float64"
    finite_checks: bool = True
    arm: str | None = None
    out_dir: str | None = None

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        d = json.loads(Path(path).read_text())
        return cls(task=TaskSpec.from_dict(d["task"]), model=ModelConfig.from_dict(d["model"]),
                   distill=d.get("distill", {}), teacher_steps=d.get("teacher_steps", 400),
                   plan=d.get("plan", {}), iterative=d.get("iterative", {}),
                   seeds=d.get("seeds", {"teacher": 0, "student": 0}),
                   calib_count=d.get("calib_count", 64),
                   score_loss=d.get("score_loss", "kd_topk"), dtype=d.get("dtype", "float64"),
                   finite_checks=d.get("finite_checks", True), arm=d.get("arm"),
                   out_dir=d.get("out_dir"))

    def to_dict(self) -> dict:
        return {"task": self.task.to_dict(), "model": self.model.to_dict(),
                "distill": self.distill, "teacher_steps": self.teacher_steps,
                "plan": self.plan, "iterative": self.iterative, "seeds": self.seeds,
                "calib_count": self.calib_count, "score_loss": self.score_loss,
                "dtype": self.dtype, "finite_checks": self.finite_checks,
                "arm": self.arm, "out_dir": self.out_dir}

    def dcfg(self, total_steps: int, batch_tokens: int | None = None) -> DistillConfig:
        merged = dict(self.distill)
        merged.setdefault("batch_tokens", 512)
        if batch_tokens is not None:
            merged["batch_tokens"] = batch_tokens
        merged["total_steps"] = total_steps
        merged["warmup_steps"] = min(merged.get("warmup_steps", 100), max(0, total_steps - 1))
        return DistillConfig(**merged)

    def apply_run_mode(self) -> None:
        ad.set_default_dtype(np.float32 if self.dtype == "float32" else np.float64)
        ad.set_finite_checks(self.finite_checks)


class _Lock:
    """Exclusive run-directory lock file; refuses concurrent writers."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"run directory is locked by another writer: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def _build_parser() -> _Parser:
    p = _Parser(prog="moeslim", description="MoE expert-slimming compression toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train-teacher", help="train a teacher on the configured task")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    c = sub.add_parser("cache-teacher", help="precompute teacher top-k logits")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--k", type=int, default=8)
    c.add_argument("--split", choices=("train", "eval"), default="train")
    c.add_argument("--out", required=True)

    s = sub.add_parser("score", help="compute a sensitivity report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--teacher", default=None)
    s.add_argument("--loss", choices=("kd", "clm"), default="kd")
    s.add_argument("--corpus", required=True)
    s.add_argument("--calib", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    pr = sub.add_parser("prune", help="structurally prune using a sensitivity report")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--report", required=True)
    pr.add_argument("--mode", choices=("slim", "gqa", "drop-expert", "dense-ffn"),
                    required=True)
    pr.add_argument("--ratio", type=float, required=True)
    pr.add_argument("--granule", type=int, default=NEURON_GRANULE)
    pr.add_argument("--out", required=True)

    d = sub.add_parser("distill", help="distill a student from a teacher cache")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--teacher-cache", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--steps", type=int, required=True)
    d.add_argument("--batch-tokens", type=int, default=512)
    d.add_argument("--lr", type=float, default=1e-4)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)

    pl = sub.add_parser("pipeline", help="run a full compression arm from a RunConfig")
    pl.add_argument("--config", required=True)
    pl.add_argument("--arm", choices=ARMS, required=True)
    pl.add_argument("--out", default=None)

    a = sub.add_parser("analyze-experts", help="expert-similarity analysis")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--layer", type=int, required=True)
    a.add_argument("--pair", type=int, nargs=2, default=None)
    a.add_argument("--out", required=True)

    r = sub.add_parser("report", help="aggregate run directories into report files")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_train_teacher(args) -> int:
    cfg = RunConfig.from_json(args.config)
    cfg.apply_run_mode()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _Lock(out):
        corpus = gen_synthetic_corpus(cfg.task)
        dcfg = cfg.dcfg(cfg.teacher_steps)
        teacher, rows = train_teacher(cfg.model, corpus, dcfg, cfg.seeds["teacher"])
        save_corpus(corpus, out / "corpus.npz")
        save_checkpoint(teacher, out / "teacher.smoe")
        write_metrics_csv(rows, out / "teacher_metrics.csv")
        write_run_manifest(out / "run_manifest.json", plan=None, seeds=cfg.seeds,
                           budgets={"teacher_steps": cfg.teacher_steps,
                                    "batch_tokens": dcfg.batch_tokens},
                           artifacts={"teacher": "teacher.smoe", "corpus": "corpus.npz",
                                      "metrics": "teacher_metrics.csv"})
    print(f"teacher trained: {out / 'teacher.smoe'}")
    return 0


def _cmd_cache_teacher(args) -> int:
    teacher = load_checkpoint(args.ckpt).model
    corpus = load_corpus(args.corpus)
    seqs = corpus.train if args.split == "train" else corpus.eval
    cache = cache_teacher_topk(teacher, seqs, args.k)
    save_teacher_cache(cache, args.out)
    print(f"cached top-{args.k} teacher logits for {cache.n_seqs} sequences: {args.out}")
    return 0


def _cmd_score(args) -> int:
    student = load_checkpoint(args.ckpt).model
    loss_kind = "kd_topk" if args.loss == "kd" else "clm"
    teacher = None
    if loss_kind == "kd_topk":
        if args.teacher is None:
            raise CliError("--teacher is required with --loss kd")
        teacher = load_checkpoint(args.teacher).model
    corpus = load_corpus(args.corpus)
    calib = sample_calibration(corpus.train, args.calib, args.seed)
    report = param_sensitivity(student, teacher, calib, loss_kind)
    report = neuron_scores(report)
    if student.config.arch_kind == "moe":
        report = gqa_group_scores(report)
        report = expert_level_scores(report, "kl_sum")
    save_checkpoint(student, args.out, report=report)
    print(f"sensitivity report ({loss_kind}) written: {args.out}")
    return 0


def _cmd_prune(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    model = loaded.model
    rep_ck = load_checkpoint(args.report)
    report = rep_ck.report
    if report is None:
        raise CliError(f"{args.report} carries no sensitivity report section")
    cfg = model.config
    if args.mode == "slim":
        keep = target_dim(cfg.d_expert, args.ratio, args.granule)
        decision = decide_slim_experts(report, keep)
        pruned = slim_experts(model, decision)
    elif args.mode == "gqa":
        keep = max(1, int(np.floor(cfg.n_groups * args.ratio + 0.5)))
        keep = min(keep, cfg.n_groups)
        decision = decide_prune_groups(report, keep)
        pruned = prune_gqa_groups(model, decision)
    elif args.mode == "drop-expert":
        keep = max(cfg.top_k, int(np.floor(cfg.n_expert * args.ratio + 0.5)))
        keep = min(keep, cfg.n_expert)
        decision = decide_drop_experts(report, keep)
        pruned = drop_experts(model, decision)
    else:
        keep = target_dim(cfg.d_ffn, args.ratio, args.granule)
        decision = decide_slim_ffn(report, keep)
        pruned = slim_dense_ffn(model, decision)
    save_checkpoint(pruned, args.out, decision=decision)
    print(f"pruned ({args.mode}, ratio {args.ratio}): {args.out}")
    return 0


def _cmd_distill(args) -> int:
    student = load_checkpoint(args.ckpt).model
    corpus = load_corpus(args.corpus)
    cache = load_teacher_cache(args.teacher_cache, corpus.spec.seq_len)
    if cache.vocab_size != student.config.vocab_size:
        raise CliError("cache vocab does not match the student model")
    dcfg = DistillConfig(total_steps=args.steps, batch_tokens=args.batch_tokens,
                         lr_peak=args.lr,
                         warmup_steps=min(100, max(0, args.steps - 1)))
    _tok, rows, _ = run_training(student, corpus.train, corpus.eval, dcfg,
                                 seed=args.seed, cache=cache, stage=1)
    out = Path(args.out)
    save_checkpoint(student, out)
    write_metrics_csv(rows, out.with_suffix(".metrics.csv"))
    print(f"distilled {args.steps} steps: {out}")
    return 0


def _pipeline_target(cfg: RunConfig) -> tuple:
    plan_d = cfg.plan
    alpha = plan_d.get("alpha", 0.25)
    T = plan_d.get("T", 2)
    total = plan_d.get("total_tokens", 200_000)
    overrides = plan_d.get("overrides")
    init_share = plan_d.get("init_share", 0.35)
    granule = plan_d.get("granule", NEURON_GRANULE)
    return alpha, T, total, overrides, init_share, granule


def _cmd_pipeline(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if cfg.arm is not None and cfg.arm != args.arm:
        raise CliError(f"config pins arm={cfg.arm!r} but --arm {args.arm} was given")
    cfg.apply_run_mode()
    out = Path(args.out or cfg.out_dir or f"runs/{args.arm}")
    out.mkdir(parents=True, exist_ok=True)
    alpha, T, total, overrides, init_share, granule = _pipeline_target(cfg)

    with _Lock(out):
        corpus = gen_synthetic_corpus(cfg.task)
        teacher_cfg = cfg.dcfg(cfg.teacher_steps)
        teacher, teacher_rows = train_teacher(cfg.model, corpus, teacher_cfg,
                                              cfg.seeds["teacher"])
        save_corpus(corpus, out / "corpus.npz")
        save_checkpoint(teacher, out / "teacher.smoe")
        write_metrics_csv(teacher_rows, out / "teacher_metrics.csv")

        dcfg = cfg.dcfg(1)  # per-stage totals are set by the runners
        cache = cache_teacher_topk(teacher, corpus.train,
                                   effective_topk(dcfg.topk_teacher,
                                                  teacher.config.vocab_size))
        seed = cfg.seeds["student"]
        plan = geometric_plan(alpha, T, cfg.model, total, overrides=overrides,
                              granule=granule, init_share=init_share)
        target = dc_replace(plan.stages[-1], token_budget=total)
        if args.arm == "multistage":
            result = run_multistage(plan, teacher, seed, dcfg, corpus, run_id="multistage",
                                    cache=cache, calib_count=cfg.calib_count,
                                    score_loss=cfg.score_loss)
        elif args.arm == "oneshot":
            result = run_oneshot(teacher, target, total, dcfg, corpus, student_seed=seed,
                                 run_id="oneshot", cache=cache, calib_count=cfg.calib_count,
                                 score_loss=cfg.score_loss)
        else:
            mask_tokens = cfg.iterative.get("mask_phase_tokens",
                                            int(total * init_share))
            n_updates = cfg.iterative.get("n_updates", 4)
            sched = cubic_mask_schedule(cfg.model, target, mask_tokens, n_updates,
                                        granule=granule)
            result = run_iterative(teacher, target, sched, total, dcfg, corpus,
                                   student_seed=seed, run_id="iterative", cache=cache,
                                   calib_count=cfg.calib_count, score_loss=cfg.score_loss)

        save_checkpoint(result.model, out / "final.smoe")
        write_metrics_csv(result.log_rows, out / "metrics.csv")
        (out / "ledger.json").write_text(
            json.dumps(result.ledger.to_dict(), indent=2, sort_keys=True))
        _write_metric_rows(result.metric_rows, out / "metric_rows.csv")
        write_run_manifest(
            out / "run_manifest.json", plan=plan.to_dict(), seeds=cfg.seeds,
            budgets={"total_tokens": total, "teacher_steps": cfg.teacher_steps},
            artifacts={"final": "final.smoe", "teacher": "teacher.smoe",
                       "corpus": "corpus.npz", "metrics": "metrics.csv",
                       "ledger": "ledger.json", "metric_rows": "metric_rows.csv"})
    print(f"{args.arm} run complete: final eval ce {result.final_eval_ce:.4f} "
          f"({result.ledger.total_tokens} tokens)")
    return 0


def _write_metric_rows(rows: list[MetricRow], path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "stage", "tokens", "eval_ce", "eval_acc", "aux",
                    "active_params"])
        for r in rows:
            w.writerow([r.run_id, r.stage, r.tokens, repr(r.eval_ce), repr(r.eval_acc),
                        repr(r.aux), r.active_params])


def _read_metric_rows(path) -> list[MetricRow]:
    import csv

    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(MetricRow(row["run_id"], int(row["stage"]), int(row["tokens"]),
                                 float(row["eval_ce"]), float(row["eval_acc"]),
                                 float(row["aux"]), int(row["active_params"])))
    return out


def _cmd_analyze(args) -> int:
    model = load_checkpoint(args.ckpt, expect_arch="moe").model
    if not 0 <= args.layer < model.config.n_layer:
        raise CliError(f"layer {args.layer} outside [0, {model.config.n_layer})")
    pairs = ([tuple(args.pair)] if args.pair else
             [(a, b) for a in range(model.config.n_expert)
              for b in range(model.config.n_expert) if a < b])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for a, b in pairs:
        res = expert_similarity(model, args.layer, a, b)
        write_similarity_json(res, out / f"similarity_L{args.layer}_E{a}_E{b}.json")
    print(f"wrote {len(pairs)} similarity files to {out}")
    return 0


def _cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    rows: list[MetricRow] = []
    ledgers: dict[str, dict] = {}
    for sub in sorted(runs_dir.iterdir()):
        rows_file = sub / "metric_rows.csv"
        if not rows_file.exists():
            continue
        rows.extend(_read_metric_rows(rows_file))
        ledger_file = sub / "ledger.json"
        if ledger_file.exists():
            led = json.loads(ledger_file.read_text())
            ledgers[led["run_id"]] = {"tokens": led["total_tokens"],
                                      "flops": led["total_flops"]}
    if not rows:
        raise CliError(f"no run artifacts found under {runs_dir}")
    run_ids = sorted({r.run_id for r in rows})
    comparisons = [(f"{a}_vs_{b}", a, b)
                   for i, a in enumerate(run_ids) for b in run_ids[i + 1:]]
    summary = emit_report(rows, comparisons, args.out, ledgers=ledgers)
    print(f"report over {len(run_ids)} runs: {Path(args.out) / 'summary.json'}")
    return 0


_COMMANDS = {
    "train-teacher": _cmd_train_teacher,
    "cache-teacher": _cmd_cache_teacher,
    "score": _cmd_score,
    "prune": _cmd_prune,
    "distill": _cmd_distill,
    "pipeline": _cmd_pipeline,
    "analyze-experts": _cmd_analyze,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.cmd](args)
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # one machine-readable line, nonzero exit
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
