"""Sensitivity scoring on calibration data and structural pruning edits.

Scores are first-order: |dL/dW * W| per weight, averaged across calibration
micro-batches (absolute scores are averaged, not gradients, so sign
cancellation cannot understate sensitivity). Aggregations: neuron scores are
row l2-norms of each expert's down-projection score matrix; GQA group scores
average the per-row l2 scores of the output projection over the rows of a
group's query heads.

Structural edits return a new model and never touch unrelated tensors; the
masked view simulates any decision without changing shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from dataclasses import replace as dc_replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .distill import TeacherCache, cache_teacher_topk, clm_loss, kd_topk_loss, total_loss
from .model import (
    ForwardMasks,
    Model,
    ModelConfig,
    aux_load_balance,
    forward_batch,
    model_from_arrays,
)

LOSS_KINDS = ("kd_topk", "clm")
NEURON_GRANULE = 16


class PruneError(ValueError):
    pass


@dataclass
class CalibrationSet:
    sequences: np.ndarray  # (count, seq_len)
    indices: np.ndarray    # row ids into the source corpus (for cache alignment)
    seed: int


def sample_calibration(train_seqs: np.ndarray, count: int, seed: int) -> CalibrationSet:
    """Uniformly sample `count` training sequences (with replacement beyond size)."""
    if count < 1:
        raise PruneError("calibration count must be positive")
    rng = np.random.default_rng(seed)
    replace = count > train_seqs.shape[0]
    idx = rng.choice(train_seqs.shape[0], size=count, replace=replace)
    idx = np.sort(idx)
    return CalibrationSet(train_seqs[idx], idx, seed)


@dataclass
class SensitivityReport:
    param_scores: dict[str, np.ndarray]
    loss_kind: str
    config: ModelConfig
    n_batches: int
    freq_counts: dict[int, np.ndarray] = field(default_factory=dict)
    neuron_scores: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    ffn_scores: dict[int, np.ndarray] = field(default_factory=dict)
    group_scores: dict[int, np.ndarray] = field(default_factory=dict)
    expert_scores: dict[int, np.ndarray] = field(default_factory=dict)
    expert_score_mode: str | None = None


def param_sensitivity(model: Model, teacher, calib: CalibrationSet,
                      loss_kind: str = "kd_topk", *, topk_teacher: int = 8,
                      aux_coef: float = 0.01, micro_batch: int = 8,
                      masks: ForwardMasks | None = None) -> SensitivityReport:
    """Per-weight |grad * weight| under the KD (teacher mode) or CLM loss,
    averaged over calibration micro-batches. Weights are never modified.
    Scoring through `masks` lets already-masked units score zero."""
    if loss_kind not in LOSS_KINDS:
        raise PruneError(f"unknown loss kind {loss_kind!r}")
    if calib.sequences.shape[0] < 1:
        raise PruneError("empty calibration set")
    if loss_kind == "kd_topk" and teacher is None:
        raise PruneError("kd_topk scoring requires a teacher model or cache")

    names = model.registry.names()
    acc = {name: np.zeros_like(model.registry[name].tensor.data, dtype=np.float64)
           for name in names}
    freq = {i: np.zeros(model.config.n_expert, dtype=np.int64)
            for i in range(model.config.n_layer)} if model.config.arch_kind == "moe" else {}

    seqs = calib.sequences
    n_batches = 0
    for start in range(0, seqs.shape[0], micro_batch):
        batch = seqs[start:start + micro_batch]
        b, n = batch.shape
        if loss_kind == "kd_topk":
            if isinstance(teacher, TeacherCache):
                idx, probs = teacher.slice(calib.indices[start:start + micro_batch])
            else:
                tc = cache_teacher_topk(teacher, batch, topk_teacher, batch_size=b)
                idx, probs = tc.indices, tc.probs
        with Tape() as tape:
            logits, stats = forward_batch(model, batch, masks)
            flat = ad.reshape(logits, (b * n, model.config.vocab_size))
            if loss_kind == "kd_topk":
                main = kd_topk_loss(idx.reshape(b * n, -1), probs.reshape(b * n, -1), flat)
            else:
                keep = (np.arange(b * n) + 1) % n != 0
                main = clm_loss(ad.take_rows(flat, np.nonzero(keep)[0]), batch[:, 1:])
            aux = aux_load_balance(stats) if stats else None
            loss = total_loss(main, aux, aux_coef)
        grads = backward(tape, loss, model.registry.tensor_map())
        for name in names:
            acc[name] += np.abs(grads[name] * model.registry[name].tensor.data)
        for i, s in enumerate(stats):
            freq[i] += s.counts
        n_batches += 1

    scores = {name: a / n_batches for name, a in acc.items()}
    return SensitivityReport(scores, loss_kind, model.config, n_batches, freq)


def _row_l2(score_matrix: np.ndarray) -> np.ndarray:
    return np.sqrt((score_matrix.astype(np.float64) ** 2).sum(axis=1))


def neuron_scores(report: SensitivityReport) -> SensitivityReport:
    """Per-neuron scores: l2 norm across each row of the down-projection scores."""
    cfg = report.config
    if cfg.arch_kind == "moe":
        for i in range(cfg.n_layer):
            key = f"layers.{i}.experts.w3"
            if key not in report.param_scores:
                raise PruneError(f"missing down-projection scores for {key}")
            stacked = report.param_scores[key]  # (n_expert, d_expert, d_model)
            for e in range(cfg.n_expert):
                report.neuron_scores[(i, e)] = _row_l2(stacked[e])
    else:
        for i in range(cfg.n_layer):
            key = f"layers.{i}.ffn.w3"
            if key not in report.param_scores:
                raise PruneError(f"missing down-projection scores for {key}")
            report.ffn_scores[i] = _row_l2(report.param_scores[key])
    return report


def gqa_group_scores(report: SensitivityReport,
                     config: ModelConfig | None = None) -> SensitivityReport:
    """Group scores: mean of the per-row l2 scores of W_O over each group's query heads."""
    cfg = config or report.config
    rows_per_group = cfg.group_size * cfg.d_head
    for i in range(cfg.n_layer):
        key = f"layers.{i}.attn.wo"
        s = report.param_scores.get(key)
        if s is None:
            raise PruneError(f"missing output-projection scores for {key}")
        if s.shape[0] != cfg.n_head_q * cfg.d_head:
            raise PruneError(
                f"{key}: {s.shape[0]} rows but config implies {cfg.n_head_q * cfg.d_head}")
        row_norms = _row_l2(s)
        report.group_scores[i] = row_norms.reshape(cfg.n_groups, rows_per_group).mean(axis=1)
    return report


def expert_level_scores(report: SensitivityReport, mode: str = "kl_sum") -> SensitivityReport:
    """Whole-expert scores: summed sensitivity (kl_sum) or calibration top-k
    selection counts (frequency)."""
    cfg = report.config
    if cfg.arch_kind != "moe":
        raise PruneError("expert-level scores require an moe model")
    if mode == "kl_sum":
        for i in range(cfg.n_layer):
            vals = np.empty(cfg.n_expert)
            for e in range(cfg.n_expert):
                vals[e] = sum(
                    report.param_scores[f"layers.{i}.experts.{e}.{w}"].sum()
                    for w in ("w1", "w2", "w3"))
            report.expert_scores[i] = vals
    elif mode == "frequency":
        if not report.freq_counts:
            raise PruneError("frequency scoring needs routing counts from calibration")
        for i in range(cfg.n_layer):
            report.expert_scores[i] = report.freq_counts[i].astype(np.float64)
    else:
        raise PruneError(f"unknown expert score mode {mode!r}")
    report.expert_score_mode = mode
    return report


# ---------------------------------------------------------------------------
# decisions


@dataclass
class PruneDecision:
    expert_neurons: dict[int, dict[int, list[int]]] | None = None
    gqa_groups: dict[int, list[int]] | None = None
    experts: dict[int, list[int]] | None = None
    ffn_neurons: dict[int, list[int]] | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for group in (self.expert_neurons, self.gqa_groups, self.experts, self.ffn_neurons):
            if group is None:
                continue
            for kept in _leaf_lists(group):
                if len(kept) == 0:
                    raise PruneError("empty kept set in decision")
                if sorted(set(kept)) != list(kept):
                    raise PruneError(f"kept indices must be sorted and unique: {kept}")
        if self.expert_neurons is not None:
            counts = {len(v) for per in self.expert_neurons.values() for v in per.values()}
            if len(counts) > 1:
                raise PruneError(f"non-uniform kept-neuron counts: {sorted(counts)}")

    def to_dict(self) -> dict:
        def conv(d):
            if d is None:
                return None
            return {str(k): (conv(v) if isinstance(v, dict) else [int(x) for x in v])
                    for k, v in d.items()}
        return {"expert_neurons": conv(self.expert_neurons),
                "gqa_groups": conv(self.gqa_groups), "experts": conv(self.experts),
                "ffn_neurons": conv(self.ffn_neurons), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "PruneDecision":
        def conv(x):
            if x is None:
                return None
            return {int(k): (conv(v) if isinstance(v, dict) else list(v))
                    for k, v in x.items()}
        return cls(conv(d.get("expert_neurons")), conv(d.get("gqa_groups")),
                   conv(d.get("experts")), conv(d.get("ffn_neurons")),
                   d.get("provenance", {}))


def _leaf_lists(d):
    for v in d.values():
        if isinstance(v, dict):
            yield from _leaf_lists(v)
        else:
            yield v


def _keep_top(scores: np.ndarray, keep: int) -> list[int]:
    """Highest-scoring `keep` indices; score ties keep the lower index."""
    if not 1 <= keep <= scores.shape[0]:
        raise PruneError(f"keep={keep} outside [1, {scores.shape[0]}]")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep]).tolist()


def target_dim(base: int, ratio: float, granule: int = NEURON_GRANULE) -> int:
    """Nearest multiple of `granule` to base*ratio, at least one granule."""
    return max(granule, int(np.floor(base * ratio / granule + 0.5)) * granule)


def decide_slim_experts(report: SensitivityReport, keep_per_expert: int,
                        provenance: dict | None = None) -> PruneDecision:
    if not report.neuron_scores:
        raise PruneError("run neuron_scores() before deciding a slim")
    kept = {i: {e: _keep_top(report.neuron_scores[(i, e)], keep_per_expert)
                for e in range(report.config.n_expert)}
            for i in range(report.config.n_layer)}
    prov = {"criterion": f"neuron_l2({report.loss_kind})", "keep": keep_per_expert}
    prov.update(provenance or {})
    return PruneDecision(expert_neurons=kept, provenance=prov)


def decide_prune_groups(report: SensitivityReport, keep_groups: int,
                        provenance: dict | None = None) -> PruneDecision:
    if not report.group_scores:
        raise PruneError("run gqa_group_scores() before deciding a group prune")
    kept = {i: _keep_top(report.group_scores[i], keep_groups)
            for i in range(report.config.n_layer)}
    prov = {"criterion": f"gqa_group_mean_l2({report.loss_kind})", "keep": keep_groups}
    prov.update(provenance or {})
    return PruneDecision(gqa_groups=kept, provenance=prov)


def decide_drop_experts(report: SensitivityReport, keep_experts: int,
                        provenance: dict | None = None) -> PruneDecision:
    if not report.expert_scores:
        raise PruneError("run expert_level_scores() before deciding an expert drop")
    if keep_experts < report.config.top_k:
        raise PruneError(
            f"cannot keep {keep_experts} experts with top_k={report.config.top_k}")
    kept = {i: _keep_top(report.expert_scores[i], keep_experts)
            for i in range(report.config.n_layer)}
    prov = {"criterion": f"expert_{report.expert_score_mode}({report.loss_kind})",
            "keep": keep_experts}
    prov.update(provenance or {})
    return PruneDecision(experts=kept, provenance=prov)


def decide_slim_ffn(report: SensitivityReport, keep: int,
                    provenance: dict | None = None) -> PruneDecision:
    if not report.ffn_scores:
        raise PruneError("run neuron_scores() before deciding an FFN slim")
    kept = {i: _keep_top(report.ffn_scores[i], keep) for i in range(report.config.n_layer)}
    prov = {"criterion": f"ffn_neuron_l2({report.loss_kind})", "keep": keep}
    prov.update(provenance or {})
    return PruneDecision(ffn_neurons=kept, provenance=prov)


# ---------------------------------------------------------------------------
# structural edits (always copy; unrelated tensors stay bit-identical)


def _copied_arrays(model: Model) -> dict[str, np.ndarray]:
    return {name: p.tensor.data.copy() for name, p in model.registry.items()}


def slim_experts(model: Model, decision: PruneDecision) -> Model:
    """Drop expert neurons: W1/W2 columns and W3 rows outside the kept sets."""
    if decision.expert_neurons is None:
        raise PruneError("decision has no expert_neurons")
    cfg = model.config
    if cfg.arch_kind != "moe":
        raise PruneError("slim_experts requires an moe model")
    counts = {len(v) for per in decision.expert_neurons.values() for v in per.values()}
    if len(counts) != 1:
        raise PruneError(f"non-uniform kept counts {sorted(counts)}")
    keep = counts.pop()
    arrays = _copied_arrays(model)
    for i in range(cfg.n_layer):
        per_expert = decision.expert_neurons[i]
        for e in range(cfg.n_expert):
            kept = np.asarray(per_expert[e])
            if kept.max() >= cfg.d_expert:
                raise PruneError(f"kept neuron {kept.max()} >= d_expert {cfg.d_expert}")
            arrays[f"layers.{i}.experts.{e}.w1"] = arrays[f"layers.{i}.experts.{e}.w1"][:, kept]
            arrays[f"layers.{i}.experts.{e}.w2"] = arrays[f"layers.{i}.experts.{e}.w2"][:, kept]
            arrays[f"layers.{i}.experts.{e}.w3"] = arrays[f"layers.{i}.experts.{e}.w3"][kept, :]
    return model_from_arrays(dc_replace(cfg, d_expert=keep), arrays)


def prune_gqa_groups(model: Model, decision: PruneDecision) -> Model:
    """Remove whole GQA groups: the shared KV pair, its query heads, and the
    matching W_O rows. Group size is preserved."""
    if decision.gqa_groups is None:
        raise PruneError("decision has no gqa_groups")
    cfg = model.config
    counts = {len(v) for v in decision.gqa_groups.values()}
    if len(counts) != 1:
        raise PruneError(f"non-uniform kept group counts {sorted(counts)}")
    n_keep = counts.pop()
    gs, dh = cfg.group_size, cfg.d_head
    arrays = _copied_arrays(model)
    for i in range(cfg.n_layer):
        kept = np.asarray(decision.gqa_groups[i])
        if kept.max() >= cfg.n_groups:
            raise PruneError(f"kept group {kept.max()} >= n_groups {cfg.n_groups}")
        kv_dims = (kept[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
        q_heads = (kept[:, None] * gs + np.arange(gs)[None, :]).reshape(-1)
        q_dims = (q_heads[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
        arrays[f"layers.{i}.attn.wq"] = arrays[f"layers.{i}.attn.wq"][:, q_dims]
        arrays[f"layers.{i}.attn.wk"] = arrays[f"layers.{i}.attn.wk"][:, kv_dims]
        arrays[f"layers.{i}.attn.wv"] = arrays[f"layers.{i}.attn.wv"][:, kv_dims]
        arrays[f"layers.{i}.attn.wo"] = arrays[f"layers.{i}.attn.wo"][q_dims, :]
    new_cfg = dc_replace(cfg, n_head_q=n_keep * gs, n_head_kv=n_keep)
    return model_from_arrays(new_cfg, arrays)


def drop_experts(model: Model, decision: PruneDecision) -> Model:
    """Remove whole experts and their router columns; survivors are renumbered."""
    if decision.experts is None:
        raise PruneError("decision has no experts")
    cfg = model.config
    if cfg.arch_kind != "moe":
        raise PruneError("drop_experts requires an moe model")
    counts = {len(v) for v in decision.experts.values()}
    if len(counts) != 1:
        raise PruneError(f"non-uniform kept expert counts {sorted(counts)}")
    n_keep = counts.pop()
    if n_keep < cfg.top_k:
        raise PruneError(f"kept experts {n_keep} < top_k {cfg.top_k}")
    old = _copied_arrays(model)
    arrays = {}
    for name, arr in old.items():
        if ".experts." not in name and ".router." not in name:
            arrays[name] = arr
    for i in range(cfg.n_layer):
        kept = np.asarray(decision.experts[i])
        if kept.max() >= cfg.n_expert:
            raise PruneError(f"kept expert {kept.max()} >= n_expert {cfg.n_expert}")
        arrays[f"layers.{i}.router.wg"] = old[f"layers.{i}.router.wg"][:, kept]
        for new_e, e in enumerate(kept):
            for w in ("w1", "w2", "w3"):
                arrays[f"layers.{i}.experts.{new_e}.{w}"] = old[f"layers.{i}.experts.{e}.{w}"]
    return model_from_arrays(dc_replace(cfg, n_expert=n_keep), arrays)


def slim_dense_ffn(model: Model, decision: PruneDecision) -> Model:
    """FFN neuron removal mirroring expert slimming (dense_ffn models only)."""
    if model.config.arch_kind != "dense_ffn":
        raise PruneError("slim_dense_ffn requires arch_kind=dense_ffn")
    if decision.ffn_neurons is None:
        raise PruneError("decision has no ffn_neurons")
    cfg = model.config
    counts = {len(v) for v in decision.ffn_neurons.values()}
    if len(counts) != 1:
        raise PruneError(f"non-uniform kept counts {sorted(counts)}")
    keep = counts.pop()
    arrays = _copied_arrays(model)
    for i in range(cfg.n_layer):
        kept = np.asarray(decision.ffn_neurons[i])
        if kept.max() >= cfg.d_ffn:
            raise PruneError(f"kept neuron {kept.max()} >= d_ffn {cfg.d_ffn}")
        arrays[f"layers.{i}.ffn.w1"] = arrays[f"layers.{i}.ffn.w1"][:, kept]
        arrays[f"layers.{i}.ffn.w2"] = arrays[f"layers.{i}.ffn.w2"][:, kept]
        arrays[f"layers.{i}.ffn.w3"] = arrays[f"layers.{i}.ffn.w3"][kept, :]
    return model_from_arrays(dc_replace(cfg, d_ffn=keep), arrays)


# ---------------------------------------------------------------------------
# masked view


@dataclass
class MaskedModel:
    """Full-size model plus forward-time zero masks simulating a decision."""
    model: Model
    masks: ForwardMasks
    decision: PruneDecision

    def active_param_count(self) -> int:
        from .model import active_param_count
        return active_param_count(apply_decision_to_config(self.model.config, self.decision))


def apply_decision_to_config(cfg: ModelConfig, decision: PruneDecision) -> ModelConfig:
    """The config the structurally edited model would have."""
    out = cfg
    if decision.expert_neurons is not None:
        keep = len(next(iter(next(iter(decision.expert_neurons.values())).values())))
        out = dc_replace(out, d_expert=keep)
    if decision.gqa_groups is not None:
        n_keep = len(next(iter(decision.gqa_groups.values())))
        out = dc_replace(out, n_head_q=n_keep * cfg.group_size, n_head_kv=n_keep)
    if decision.experts is not None:
        out = dc_replace(out, n_expert=len(next(iter(decision.experts.values()))))
    if decision.ffn_neurons is not None:
        out = dc_replace(out, d_ffn=len(next(iter(decision.ffn_neurons.values()))))
    return out


def masked_forward_setup(model: Model, decision: PruneDecision) -> MaskedModel:
    """Zero-mask pruned units at forward time without structural edits.

    Outputs agree with the structurally pruned model within float tolerance
    on every input.
    """
    cfg = model.config
    dtype = model.embed.data.dtype
    masks = ForwardMasks()
    if decision.expert_neurons is not None:
        for i, per_expert in decision.expert_neurons.items():
            m = np.zeros((cfg.n_expert, cfg.d_expert), dtype=dtype)
            for e, kept in per_expert.items():
                if max(kept) >= cfg.d_expert:
                    raise PruneError(f"neuron index {max(kept)} >= d_expert {cfg.d_expert}")
                m[e, np.asarray(kept)] = 1.0
            masks.neuron[i] = m
    if decision.gqa_groups is not None:
        gs, dh = cfg.group_size, cfg.d_head
        for i, kept in decision.gqa_groups.items():
            if max(kept) >= cfg.n_groups:
                raise PruneError(f"group index {max(kept)} >= n_groups {cfg.n_groups}")
            m = np.zeros(cfg.n_head_q * dh, dtype=dtype)
            for g in kept:
                m[g * gs * dh:(g + 1) * gs * dh] = 1.0
            masks.head_dims[i] = m
    if decision.experts is not None:
        for i, kept in decision.experts.items():
            if max(kept) >= cfg.n_expert:
                raise PruneError(f"expert index {max(kept)} >= n_expert {cfg.n_expert}")
            allowed = np.zeros(cfg.n_expert, dtype=bool)
            allowed[np.asarray(kept)] = True
            masks.expert_allowed[i] = allowed
    if decision.ffn_neurons is not None:
        for i, kept in decision.ffn_neurons.items():
            if max(kept) >= cfg.d_ffn:
                raise PruneError(f"ffn neuron index {max(kept)} >= d_ffn {cfg.d_ffn}")
            m = np.zeros(cfg.d_ffn, dtype=dtype)
            m[np.asarray(kept)] = 1.0
            masks.ffn[i] = m
    return MaskedModel(model, masks, decision)


def apply_decision(model: Model, decision: PruneDecision) -> Model:
    """Run every structural edit present in the decision, in a fixed order."""
    out = model
    if decision.expert_neurons is not None:
        out = slim_experts(out, decision)
    if decision.gqa_groups is not None:
        out = prune_gqa_groups(out, decision)
    if decision.experts is not None:
        out = drop_experts(out, decision)
    if decision.ffn_neurons is not None:
        out = slim_dense_ffn(out, decision)
    return out
