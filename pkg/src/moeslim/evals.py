"""Evaluation metrics, routing statistics, expert-similarity analysis, and
report emission. Everything here is pure and deterministic: repeated calls on
the same model and data agree bit-wise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ConfigError, Model, forward_batch

REPORT_SCHEMA = "moeslim.report.v1"
REPORT_COLUMNS = ["run_id", "stage", "tokens", "eval_ce", "eval_acc", "aux", "active_params"]


@dataclass
class MetricRow:
    run_id: str
    stage: int
    tokens: int
    eval_ce: float
    eval_acc: float
    aux: float
    active_params: int


def evaluate(model: Model, eval_seqs: np.ndarray, batch_size: int = 32) -> tuple[float, float]:
    """Mean next-token cross-entropy (nats) and argmax accuracy over eval tokens."""
    seqs = np.asarray(eval_seqs)
    if seqs.ndim != 2 or seqs.shape[0] < 1 or seqs.shape[1] < 2:
        raise ValueError(f"evaluate needs a non-empty (seqs, len>=2) matrix, got {seqs.shape}")
    ce_sum = 0.0
    correct = 0
    total = 0
    for start in range(0, seqs.shape[0], batch_size):
        batch = seqs[start:start + batch_size]
        logits, _ = forward_batch(model, batch)
        ls = ad.log_softmax(logits, axis=-1).data  # (b, n, vocab)
        targets = batch[:, 1:]
        picked = np.take_along_axis(ls[:, :-1, :], targets[:, :, None], axis=2)[:, :, 0]
        ce_sum += float(-picked.sum())
        correct += int((ls[:, :-1, :].argmax(axis=-1) == targets).sum())
        total += targets.size
    return ce_sum / total, correct / total


def routing_stats(model: Model, seqs: np.ndarray, batch_size: int = 32) -> list[dict]:
    """Per-layer expert selection frequencies and mean gate mass over a dataset.

    Frequencies are counts / n_tokens, so they sum to top_k per token.
    """
    if model.config.arch_kind != "moe":
        raise ConfigError("routing_stats requires an moe model")
    seqs = np.asarray(seqs)
    counts = [np.zeros(model.config.n_expert, dtype=np.int64) for _ in model.layers]
    mass = [np.zeros(model.config.n_expert) for _ in model.layers]
    n_tokens = 0
    for start in range(0, seqs.shape[0], batch_size):
        batch = seqs[start:start + batch_size]
        _, stats = forward_batch(model, batch)
        n_tokens += batch.size
        for i, s in enumerate(stats):
            counts[i] += s.counts
            mass[i] += s.gate_mass
    return [
        {"counts": c, "freq": c / n_tokens, "gate_mass": m / n_tokens}
        for c, m in zip(counts, mass)
    ]


def expert_neuron_matrix(model: Model, layer: int, expert: int) -> np.ndarray:
    """Neuron embedding: W1 column + W2 column + W3 row, one row per neuron."""
    e = model.layers[layer].experts[expert]
    return np.concatenate([e.w1.data.T, e.w2.data.T, e.w3.data], axis=1)


def expert_similarity(model: Model, layer: int, expert_a: int, expert_b: int,
                      n_bins: int = 20) -> dict:
    """For each neuron of expert_a, its max cosine similarity over expert_b's neurons.

    Zero-norm neurons get similarity 0 and are flagged.
    """
    a = expert_neuron_matrix(model, layer, expert_a)
    b = expert_neuron_matrix(model, layer, expert_b)
    if a.shape != b.shape:
        raise ValueError(f"expert shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero_a = na == 0
    zero_b = nb == 0
    an = np.where(zero_a[:, None], 0.0, a / np.where(zero_a, 1.0, na)[:, None])
    bn = np.where(zero_b[:, None], 0.0, b / np.where(zero_b, 1.0, nb)[:, None])
    cos = an @ bn.T  # (d_expert, d_expert)
    max_cos = cos.max(axis=1)
    argmax = cos.argmax(axis=1)
    max_cos = np.where(zero_a, 0.0, max_cos)
    hist, edges = np.histogram(max_cos, bins=n_bins, range=(-1.0, 1.0))
    return {
        "layer": layer,
        "experts": (expert_a, expert_b),
        "max_cos": max_cos,
        "argmax": argmax,
        "hist_counts": hist,
        "hist_edges": edges,
        "flagged_zero_norm": np.nonzero(zero_a)[0].tolist(),
    }


def write_similarity_json(result: dict, path) -> None:
    payload = {
        "schema": "moeslim.similarity.v1",
        "layer": result["layer"],
        "experts": list(result["experts"]),
        "max_cos": [float(x) for x in result["max_cos"]],
        "argmax": [int(x) for x in result["argmax"]],
        "hist_counts": [int(x) for x in result["hist_counts"]],
        "hist_edges": [float(x) for x in result["hist_edges"]],
        "flagged_zero_norm": result["flagged_zero_norm"],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def resample_curve(tokens: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation of a metric curve onto a common token grid."""
    return np.interp(grid, np.asarray(tokens, float), np.asarray(values, float))


def emit_report(rows: list[MetricRow], comparisons: list[tuple[str, str, str]],
                out_dir, ledgers: dict[str, dict] | None = None) -> dict:
    """Write report.csv (all metric rows) and summary.csv (per-run finals plus
    comparison verdicts). Returns the summary as a dict."""
    if not rows:
        raise ValueError("emit_report needs at least one metric row")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.run_id, r.tokens, r.stage))

    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([d[c] for c in REPORT_COLUMNS])

    finals: dict[str, MetricRow] = {}
    for r in rows:
        finals[r.run_id] = r  # rows sorted by tokens: last one wins
    run_ids = sorted(finals)

    verdicts = []
    for name, run_a, run_b in comparisons:
        if run_a not in finals or run_b not in finals:
            raise ValueError(f"comparison {name!r} references unknown runs")
        ce_a, ce_b = finals[run_a].eval_ce, finals[run_b].eval_ce
        sign = 0 if ce_a == ce_b else (-1 if ce_a < ce_b else 1)
        verdicts.append({
            "name": name, "run_a": run_a, "run_b": run_b,
            "eval_ce_a": ce_a, "eval_ce_b": ce_b,
            "sign": sign,
            "winner": "tie" if sign == 0 else (run_a if sign < 0 else run_b),
        })

    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "final_eval_ce", "final_eval_acc", "tokens", "flops"])
        for rid in run_ids:
            r = finals[rid]
            led = (ledgers or {}).get(rid, {})
            w.writerow([rid, r.eval_ce, r.eval_acc, led.get("tokens", r.tokens),
                        led.get("flops", "")])

    summary = {
        "schema": REPORT_SCHEMA,
        "runs": {rid: {"final_eval_ce": finals[rid].eval_ce,
                       "final_eval_acc": finals[rid].eval_acc,
                       "tokens": finals[rid].tokens} for rid in run_ids},
        "comparisons": verdicts,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
