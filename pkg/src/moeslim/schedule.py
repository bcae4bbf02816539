"""Compression-run orchestration: geometric multi-stage plans, the prune-and-
distill pipeline, one-shot and iterative baselines, and token/FLOP accounting.

Every stage distills from the ORIGINAL teacher (via its cached top-k logits),
never from the previous stage's model. Seeds are derived per (run seed, role,
stage), so a T=1 multi-stage run and a one-shot run with the same seed follow
bit-identical trajectories.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .distill import DistillConfig, TeacherCache, TrainLogRow, cache_teacher_topk, run_training
from .evals import MetricRow
from .model import Model, ModelConfig, active_param_count
from .pruning import (
    NEURON_GRANULE,
    PruneDecision,
    PruneError,
    apply_decision,
    decide_drop_experts,
    decide_prune_groups,
    decide_slim_experts,
    decide_slim_ffn,
    expert_level_scores,
    gqa_group_scores,
    masked_forward_setup,
    neuron_scores,
    param_sensitivity,
    sample_calibration,
    target_dim,
)

METRIC_COLUMNS = ["step", "tokens", "train_loss", "eval_loss", "aux", "lr", "stage"]

_SEED_ROLES = {"calib": 101, "train": 211, "mask": 307}


def effective_topk(k: int, vocab_size: int) -> int:
    """Pipeline-level clamp: a top-8 cache on a small vocab stores min(8, V)."""
    return min(k, vocab_size)


class PlanError(ValueError):
    pass


def derive_seed(seed: int, role: str, stage: int) -> int:
    ss = np.random.SeedSequence([int(seed), _SEED_ROLES[role], int(stage)])
    return int(ss.generate_state(1, np.uint64)[0] % (2**63))


@dataclass
class StageSpec:
    token_budget: int
    d_expert: int | None = None
    n_head_q: int | None = None
    n_head_kv: int | None = None
    n_expert: int | None = None  # expert-dropping baseline
    d_ffn: int | None = None     # dense-FFN arm
    stop_rule: str = "budget"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class StagePlan:
    stages: list[StageSpec]
    alpha: float
    base_config: ModelConfig

    @property
    def T(self) -> int:
        return len(self.stages)

    def __post_init__(self):
        if not self.stages:
            raise PlanError("a plan needs at least one stage")
        base = self.base_config
        dims = [base.d_expert] + [s.d_expert for s in self.stages if s.d_expert is not None]
        if any(b > a for a, b in zip(dims, dims[1:])):
            raise PlanError(f"d_expert must be non-increasing across stages: {dims}")
        kvs = [base.n_head_kv] + [s.n_head_kv for s in self.stages if s.n_head_kv is not None]
        if any(b > a for a, b in zip(kvs, kvs[1:])):
            raise PlanError(f"n_head_kv must be non-increasing across stages: {kvs}")
        for s in self.stages:
            if (s.n_head_q is None) != (s.n_head_kv is None):
                raise PlanError("override both n_head_q and n_head_kv or neither")
            if s.n_head_q is not None and s.n_head_q != s.n_head_kv * base.group_size:
                raise PlanError(
                    f"stage heads {s.n_head_q}/{s.n_head_kv} break group size {base.group_size}")
            if s.token_budget < 0:
                raise PlanError("negative token budget")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "stages": [s.to_dict() for s in self.stages],
                "base_config": self.base_config.to_dict()}


def geometric_plan(alpha: float, T: int, base_config: ModelConfig, total_tokens: int,
                   overrides: list[dict | None] | None = None,
                   granule: int = NEURON_GRANULE, init_share: float = 0.35) -> StagePlan:
    """Stage t targets d_expert * alpha^(t/T), rounded to the granule; the final
    stage is forced to the exact target. Default budgets give initialization
    stages `init_share` of the tokens, split equally."""
    if not 0 < alpha < 1:
        raise PlanError(f"alpha must be in (0, 1), got {alpha}")
    if T < 1:
        raise PlanError(f"T must be >= 1, got {T}")
    if overrides is not None and len(overrides) != T:
        raise PlanError(f"got {len(overrides)} overrides for {T} stages")
    base_dim = base_config.d_expert
    target = target_dim(base_dim, alpha, granule)

    if T == 1:
        budgets = [total_tokens]
    else:
        init_each = int(total_tokens * init_share) // (T - 1)
        budgets = [init_each] * (T - 1) + [total_tokens - init_each * (T - 1)]

    stages = []
    for t in range(T):
        if t == T - 1:
            dim = target
        else:
            dim = target_dim(base_dim, alpha ** ((t + 1) / T), granule)
        spec = StageSpec(token_budget=budgets[t], d_expert=dim)
        ov = overrides[t] if overrides else None
        if ov:
            unknown = set(ov) - set(StageSpec.__dataclass_fields__)
            if unknown:
                raise PlanError(f"unknown override keys {sorted(unknown)}")
            spec = dc_replace(spec, **ov)
        stages.append(spec)
    if stages[-1].d_expert != target:
        raise PlanError(
            f"final stage d_expert {stages[-1].d_expert} != overall target {target}")
    return StagePlan(stages, alpha, base_config)


# ---------------------------------------------------------------------------
# budget accounting


def flops_account(config: ModelConfig, tokens: int) -> int:
    """Dense-equivalent training FLOPs: 6 * active params * tokens."""
    return 6 * active_param_count(config) * int(tokens)


@dataclass
class StageLedger:
    tag: str
    tokens: int
    active_params: int
    flops: int
    wall_clock_s: float


@dataclass
class BudgetLedger:
    run_id: str
    baseline: str
    stages: list[StageLedger] = field(default_factory=list)

    def add(self, tag: str, tokens: int, config: ModelConfig, wall_clock_s: float) -> None:
        self.stages.append(StageLedger(tag, tokens, active_param_count(config),
                                       flops_account(config, tokens), wall_clock_s))

    @property
    def total_tokens(self) -> int:
        return sum(s.tokens for s in self.stages)

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.stages)

    @property
    def total_wall_clock_s(self) -> float:
        return sum(s.wall_clock_s for s in self.stages)

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "baseline": self.baseline,
                "stages": [vars(s) for s in self.stages],
                "total_tokens": self.total_tokens, "total_flops": self.total_flops,
                "total_wall_clock_s": self.total_wall_clock_s}


@dataclass
class RunResult:
    run_id: str
    model: Model
    ledger: BudgetLedger
    log_rows: list[TrainLogRow]
    metric_rows: list[MetricRow]
    final_eval_ce: float
    final_eval_acc: float


# ---------------------------------------------------------------------------
# stage helpers


def _score_and_decide(student: Model, cache: TeacherCache, corpus_train: np.ndarray,
                      stage: StageSpec, seed: int, stage_idx: int, dcfg: DistillConfig,
                      score_loss: str, calib_count: int, masks=None) -> PruneDecision | None:
    cfg = student.config
    wants_slim = stage.d_expert is not None and stage.d_expert < cfg.d_expert
    wants_heads = stage.n_head_kv is not None and stage.n_head_kv < cfg.n_head_kv
    wants_drop = stage.n_expert is not None and stage.n_expert < cfg.n_expert
    wants_ffn = stage.d_ffn is not None and cfg.arch_kind == "dense_ffn" and \
        stage.d_ffn < cfg.d_ffn
    if not (wants_slim or wants_heads or wants_drop or wants_ffn):
        return None
    calib = sample_calibration(corpus_train, calib_count,
                               derive_seed(seed, "calib", stage_idx))
    teacher_src = cache if score_loss == "kd_topk" else None
    report = param_sensitivity(student, teacher_src, calib, score_loss,
                               topk_teacher=effective_topk(dcfg.topk_teacher,
                                                           student.config.vocab_size),
                               aux_coef=dcfg.aux_coef, masks=masks)
    provenance = {"stage": stage_idx, "score_loss": score_loss}
    merged = PruneDecision(provenance=provenance)
    if wants_slim or wants_ffn:
        report = neuron_scores(report)
    if wants_slim:
        merged.expert_neurons = decide_slim_experts(report, stage.d_expert).expert_neurons
    if wants_heads:
        report = gqa_group_scores(report)
        merged.gqa_groups = decide_prune_groups(report, stage.n_head_kv).gqa_groups
    if wants_drop:
        report = expert_level_scores(report, "kl_sum")
        merged.experts = decide_drop_experts(report, stage.n_expert).experts
    if wants_ffn:
        merged.ffn_neurons = decide_slim_ffn(report, stage.d_ffn).ffn_neurons
    return merged


def _steps_for(budget_tokens: int, batch_tokens: int) -> int:
    return max(1, int(round(budget_tokens / batch_tokens))) if budget_tokens > 0 else 0


def _log_to_metric(rows: list[TrainLogRow], run_id: str, config: ModelConfig) -> list[MetricRow]:
    active = active_param_count(config)
    return [MetricRow(run_id, r.stage, r.tokens, r.eval_loss, r.eval_acc, r.aux, active)
            for r in rows]


# ---------------------------------------------------------------------------
# runs


def run_multistage(plan: StagePlan, teacher: Model, student_seed: int, dcfg: DistillConfig,
                   corpus, *, run_id: str = "multistage", cache: TeacherCache | None = None,
                   calib_count: int = 64, score_loss: str = "kd_topk",
                   baseline_tag: str | None = None) -> RunResult:
    """Per stage: score on calibration data, prune structurally, then distill
    from the original teacher until the stage's stop rule fires."""
    if cache is None:
        cache = cache_teacher_topk(teacher, corpus.train,
                                   effective_topk(dcfg.topk_teacher,
                                                  teacher.config.vocab_size))
    student = teacher.clone()
    ledger = BudgetLedger(run_id, baseline_tag or ("oneshot" if plan.T == 1 else "multistage"))
    log_rows: list[TrainLogRow] = []
    metric_rows: list[MetricRow] = []
    tokens_offset = 0
    final_ce = final_acc = float("nan")
    data_rng = np.random.default_rng(derive_seed(student_seed, "train", 0))
    for t, stage in enumerate(plan.stages):
        t0 = time.perf_counter()
        decision = _score_and_decide(student, cache, corpus.train, stage, student_seed,
                                     t, dcfg, score_loss, calib_count)
        if decision is not None:
            student = apply_decision(student, decision)
        steps = _steps_for(stage.token_budget, dcfg.batch_tokens)
        stage_cfg = dc_replace(dcfg, total_steps=steps,
                               warmup_steps=min(dcfg.warmup_steps, max(0, steps - 1)))
        used, rows, _hist = run_training(
            student, corpus.train, corpus.eval, stage_cfg,
            data_rng=data_rng, cache=cache, stage=t + 1,
            stop_rule=stage.stop_rule, tokens_offset=tokens_offset)
        tokens_offset += used
        ledger.add(f"stage{t + 1}", used, student.config, time.perf_counter() - t0)
        log_rows.extend(rows)
        metric_rows.extend(_log_to_metric(rows, run_id, student.config))
        if rows:
            final_ce, final_acc = rows[-1].eval_loss, rows[-1].eval_acc
    return RunResult(run_id, student, ledger, log_rows, metric_rows, final_ce, final_acc)


def run_oneshot(teacher: Model, target: StageSpec, budget_tokens: int, dcfg: DistillConfig,
                corpus, *, student_seed: int, run_id: str = "oneshot",
                cache: TeacherCache | None = None, calib_count: int = 64,
                score_loss: str = "kd_topk") -> RunResult:
    """Prune to the target size in a single step at t=0, then distill."""
    stage = dc_replace(target, token_budget=budget_tokens)
    alpha = (stage.d_expert / teacher.config.d_expert
             if stage.d_expert else 1.0)
    plan = StagePlan([stage], alpha, teacher.config)
    return run_multistage(plan, teacher, student_seed, dcfg, corpus, run_id=run_id,
                          cache=cache, calib_count=calib_count, score_loss=score_loss,
                          baseline_tag="oneshot")


def cubic_mask_schedule(base_config: ModelConfig, target: StageSpec,
                        mask_phase_tokens: int, n_updates: int,
                        granule: int = NEURON_GRANULE) -> list[tuple[int, StageSpec]]:
    """Token points and active dims for the iterative baseline: the kept size
    shrinks cubically in training progress and lands exactly on the target."""
    if n_updates < 1:
        raise PlanError("need at least one mask update")
    out = []
    base_de = base_config.d_expert
    tgt_de = target.d_expert if target.d_expert is not None else base_de
    base_kv = base_config.n_head_kv
    tgt_kv = target.n_head_kv if target.n_head_kv is not None else base_kv
    prev_de, prev_kv = base_de, base_kv
    for i in range(1, n_updates + 1):
        frac = i / n_updates
        remain = (1.0 - frac) ** 3
        de = tgt_de + (base_de - tgt_de) * remain
        de = max(tgt_de, min(prev_de, int(np.floor(de / granule + 0.5)) * granule))
        kv = int(np.ceil(tgt_kv + (base_kv - tgt_kv) * remain))
        kv = max(tgt_kv, min(prev_kv, kv))
        token_point = int(round(mask_phase_tokens * frac))
        out.append((token_point, dc_replace(target, d_expert=de, n_head_q=kv * base_config.group_size,
                                            n_head_kv=kv, token_budget=0)))
        prev_de, prev_kv = de, kv
    return out


def run_iterative(teacher: Model, target: StageSpec, prune_schedule: list[tuple[int, StageSpec]],
                  budget_tokens: int, dcfg: DistillConfig, corpus, *, student_seed: int,
                  run_id: str = "iterative", cache: TeacherCache | None = None,
                  calib_count: int = 64, score_loss: str = "kd_topk",
                  mask_calib_count: int = 16) -> RunResult:
    """Train the FULL-SIZE model under tightening masks (cubic schedule), then
    convert masks to a structural edit and keep distilling. The ledger charges
    the masked phase at the full model's active-parameter cost."""
    if not prune_schedule:
        return run_oneshot(teacher, target, budget_tokens, dcfg, corpus,
                           student_seed=student_seed, run_id=run_id, cache=cache,
                           calib_count=calib_count, score_loss=score_loss)
    points = [p for p, _ in prune_schedule]
    if points != sorted(points):
        raise PlanError(f"prune schedule must be token-monotone: {points}")
    dims = [s.d_expert for _, s in prune_schedule if s.d_expert is not None]
    if any(b > a for a, b in zip(dims, dims[1:])):
        raise PlanError(f"prune schedule dims must be non-increasing: {dims}")
    last = prune_schedule[-1][1]
    tgt_de = target.d_expert if target.d_expert is not None else teacher.config.d_expert
    tgt_kv = target.n_head_kv if target.n_head_kv is not None else teacher.config.n_head_kv
    if (last.d_expert, last.n_head_kv) != (tgt_de, tgt_kv):
        raise PlanError("prune schedule must end at the target dims")

    if cache is None:
        cache = cache_teacher_topk(teacher, corpus.train,
                                   effective_topk(dcfg.topk_teacher,
                                                  teacher.config.vocab_size))
    student = teacher.clone()
    mask_phase_tokens = prune_schedule[-1][0]
    mask_steps = _steps_for(mask_phase_tokens, dcfg.batch_tokens)
    ledger = BudgetLedger(run_id, "iterative")
    log_rows: list[TrainLogRow] = []
    metric_rows: list[MetricRow] = []

    state = {"masks": None, "decision": None, "next": 0, "update_idx": 0}

    def mask_callback(step: int):
        tokens_now = step * dcfg.batch_tokens
        while state["next"] < len(prune_schedule) and \
                prune_schedule[state["next"]][0] <= tokens_now:
            _point, spec = prune_schedule[state["next"]]
            calib = sample_calibration(corpus.train, mask_calib_count,
                                       derive_seed(student_seed, "mask", state["update_idx"]))
            decision = _score_and_decide(student, cache, corpus.train, spec, student_seed,
                                         state["update_idx"], dcfg, score_loss,
                                         mask_calib_count, masks=state["masks"])
            if decision is not None:
                state["decision"] = decision
                state["masks"] = masked_forward_setup(student, decision).masks
            state["next"] += 1
            state["update_idx"] += 1
        return state["masks"]

    t0 = time.perf_counter()
    data_rng = np.random.default_rng(derive_seed(student_seed, "train", 0))
    masked_cfg = dc_replace(dcfg, total_steps=mask_steps,
                            warmup_steps=min(dcfg.warmup_steps, max(0, mask_steps - 1)))
    used_masked, rows, _ = run_training(
        student, corpus.train, corpus.eval, masked_cfg,
        data_rng=data_rng, cache=cache, stage=1,
        tokens_offset=0, mask_callback=mask_callback)
    ledger.add("masked_phase", used_masked, student.config, time.perf_counter() - t0)
    log_rows.extend(rows)
    metric_rows.extend(_log_to_metric(rows, run_id, student.config))

    # drain any updates scheduled exactly at the phase boundary, then go structural
    mask_callback(mask_steps)
    if state["decision"] is None:
        raise PlanError("mask schedule produced no decision")
    student = apply_decision(student, state["decision"])

    t0 = time.perf_counter()
    remaining = budget_tokens - used_masked
    steps = _steps_for(remaining, dcfg.batch_tokens)
    final_cfg = dc_replace(dcfg, total_steps=steps,
                           warmup_steps=min(dcfg.warmup_steps, max(0, steps - 1)))
    used_final, rows, _ = run_training(
        student, corpus.train, corpus.eval, final_cfg,
        data_rng=data_rng, cache=cache, stage=2,
        tokens_offset=used_masked)
    ledger.add("structural_phase", used_final, student.config, time.perf_counter() - t0)
    log_rows.extend(rows)
    metric_rows.extend(_log_to_metric(rows, run_id, student.config))
    final_ce = rows[-1].eval_loss if rows else float("nan")
    final_acc = rows[-1].eval_acc if rows else float("nan")
    return RunResult(run_id, student, ledger, log_rows, metric_rows, final_ce, final_acc)


def train_teacher(config: ModelConfig, corpus, dcfg: DistillConfig, seed: int,
                  run_id: str = "teacher") -> tuple[Model, list[TrainLogRow]]:
    """Train a fresh model on the task with the CLM objective (plus aux balance)."""
    from .model import init_model

    model = init_model(config, seed)
    _tokens, rows, _ = run_training(model, corpus.train, corpus.eval, dcfg,
                                    seed=derive_seed(seed, "train", 0), stage=0)
    return model, rows


# ---------------------------------------------------------------------------
# artifacts


def write_metrics_csv(rows: list[TrainLogRow], path) -> None:
    """Append-only metric log with the fixed column set."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r.step, r.tokens, repr(r.train_loss), repr(r.eval_loss),
                        repr(r.aux), repr(r.lr), r.stage])


def write_run_manifest(path, *, plan: dict | None, seeds: dict, budgets: dict,
                       artifacts: dict) -> None:
    payload = {"schema": "moeslim.run.v1", "plan": plan, "seeds": seeds,
               "budgets": budgets, "artifacts": artifacts}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
