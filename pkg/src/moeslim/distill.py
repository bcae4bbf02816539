"""Knowledge-distillation losses and the training loop.

Top-k-masked KL against cached teacher probabilities, causal LM loss, the
load-balance auxiliary term, AdamW-style updates with decoupled weight decay,
cosine LR with linear warmup, plateau early stopping, and the teacher-logit
cache (in memory and on disk).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .evals import evaluate
from .model import Model, aux_load_balance, fingerprint, forward_batch

CACHE_MAGIC = b"SMTC"
CACHE_VERSION = 1


class DistillError(ValueError):
    pass


class TrainAbort(RuntimeError):
    """Raised when a step produces a non-finite loss; model/state are untouched."""


@dataclass
class DistillConfig:
    total_steps: int
    batch_tokens: int
    topk_teacher: int = 8
    aux_coef: float = 0.01
    lr_peak: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    plateau_window: int = 5
    plateau_eps: float = 0.01
    lr_floor_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 50
    eval_seqs: int = 16

    def __post_init__(self):
        if self.topk_teacher < 1:
            raise DistillError(f"topk_teacher must be >= 1, got {self.topk_teacher}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise DistillError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}")
        if self.batch_tokens < 1:
            raise DistillError("batch_tokens must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# teacher cache


@dataclass
class TeacherCache:
    indices: np.ndarray  # (n_seqs, seq_len, k) int64
    probs: np.ndarray    # (n_seqs, seq_len, k) float32, descending per position
    k: int
    vocab_size: int
    teacher_fingerprint: int

    def __post_init__(self):
        if self.indices.shape != self.probs.shape:
            raise DistillError("cache index/prob shape mismatch")
        if (self.probs <= 0).any():
            raise DistillError("cache probabilities must be positive")
        if (np.diff(self.probs.astype(np.float64), axis=-1) > 0).any():
            raise DistillError("cache probabilities must be sorted descending")
        flat = self.indices.reshape(-1, self.k)
        if self.k > 1 and (np.sort(flat, axis=1)[:, 1:] == np.sort(flat, axis=1)[:, :-1]).any():
            raise DistillError("cache has duplicate indices at a position")

    @property
    def n_seqs(self) -> int:
        return self.indices.shape[0]

    @property
    def seq_len(self) -> int:
        return self.indices.shape[1]

    def slice(self, seq_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.indices[seq_ids], self.probs[seq_ids]


def cache_teacher_topk(teacher: Model, seqs: np.ndarray, k: int,
                       batch_size: int = 16) -> TeacherCache:
    """Precompute per-position teacher top-k indices and softmax probabilities.

    Descending by probability, ties to the lower index; deterministic.
    """
    if k > teacher.config.vocab_size:
        raise DistillError(f"k={k} exceeds vocab_size {teacher.config.vocab_size}")
    seqs = np.asarray(seqs)
    all_idx = []
    all_probs = []
    for start in range(0, seqs.shape[0], batch_size):
        batch = seqs[start:start + batch_size]
        logits, _ = forward_batch(teacher, batch)
        flat = logits.data.reshape(-1, teacher.config.vocab_size)
        idx = ad.topk_indices(flat, k, axis=-1)
        ls = ad.log_softmax(Tensor._wrap(flat, False), axis=-1).data
        probs = np.exp(np.take_along_axis(ls, idx, axis=1))
        all_idx.append(idx.reshape(batch.shape[0], batch.shape[1], k))
        all_probs.append(probs.reshape(batch.shape[0], batch.shape[1], k))
    return TeacherCache(
        np.concatenate(all_idx).astype(np.int64),
        np.concatenate(all_probs).astype(np.float32),
        k, teacher.config.vocab_size, fingerprint(teacher))


def save_teacher_cache(cache: TeacherCache, path) -> None:
    """Binary wire format, little-endian: header then fixed-width records.

    header: magic 'SMTC', version u32, k u32, vocab u32, fingerprint u64, token_count u64
    record: position u64, then k x (index u32, prob f32)
    """
    n_tokens = cache.n_seqs * cache.seq_len
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIIQQ", CACHE_VERSION, cache.k, cache.vocab_size,
                            cache.teacher_fingerprint, n_tokens))
        pair = np.empty((n_tokens, cache.k), dtype=[("i", "<u4"), ("p", "<f4")])
        pair["i"] = cache.indices.reshape(n_tokens, cache.k)
        pair["p"] = cache.probs.reshape(n_tokens, cache.k)
        body = np.empty(n_tokens, dtype=[("pos", "<u8"), ("pairs", pair.dtype, (cache.k,))])
        body["pos"] = np.arange(n_tokens, dtype="<u8")
        body["pairs"] = pair
        f.write(body.tobytes())


def load_teacher_cache(path, seq_len: int) -> TeacherCache:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise DistillError(f"bad cache magic {magic!r}")
        version, k, vocab, fp, n_tokens = struct.unpack("<IIIQQ", f.read(28))
        if version != CACHE_VERSION:
            raise DistillError(f"unsupported cache version {version}")
        pair = np.dtype([("i", "<u4"), ("p", "<f4")])
        body = np.frombuffer(f.read(), dtype=[("pos", "<u8"), ("pairs", pair, (k,))])
    if body.shape[0] != n_tokens:
        raise DistillError("cache truncated: record count mismatch")
    if n_tokens % seq_len != 0:
        raise DistillError(f"token count {n_tokens} not divisible by seq_len {seq_len}")
    if not np.array_equal(body["pos"], np.arange(n_tokens, dtype=np.uint64)):
        raise DistillError("cache positions are not contiguous")
    n_seqs = n_tokens // seq_len
    idx = body["pairs"]["i"].astype(np.int64).reshape(n_seqs, seq_len, k)
    probs = body["pairs"]["p"].astype(np.float32).reshape(n_seqs, seq_len, k)
    return TeacherCache(idx, probs, k, vocab, fp)


# ---------------------------------------------------------------------------
# losses


def kd_topk_loss(cache_idx: np.ndarray, cache_probs: np.ndarray,
                 student_logits: Tensor) -> Tensor:
    """KL(teacher_top_k || student) per token, teacher mass renormalized to 1,
    averaged over tokens. student_logits: (n_tokens, vocab)."""
    vocab = student_logits.shape[-1]
    idx = np.asarray(cache_idx).reshape(-1, cache_idx.shape[-1])
    if idx.max() >= vocab:
        raise DistillError(f"cache index {idx.max()} >= vocab {vocab}")
    n_tokens, k = idx.shape
    q = np.asarray(cache_probs, dtype=np.float64).reshape(n_tokens, k)
    q = q / q.sum(axis=1, keepdims=True)
    entropy = float((q * np.log(q)).sum() / n_tokens)  # sum_t sum_j q log q / T

    ls = ad.log_softmax(student_logits, axis=-1)
    rows = np.repeat(np.arange(n_tokens), k)
    picked = ad.reshape(ad.gather_elements(ls, rows, idx.reshape(-1)), (n_tokens, k))
    cross = ad.mul(ad.sumt(ad.mul(picked, q)), 1.0 / n_tokens)
    return ad.sub(Tensor(np.asarray(entropy)), cross)


def clm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood. logits: (n_tokens, vocab)."""
    targets = np.asarray(targets).reshape(-1)
    vocab = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise DistillError(f"target outside vocab {vocab}")
    ls = ad.log_softmax(logits, axis=-1)
    picked = ad.gather_elements(ls, np.arange(len(targets)), targets)
    return ad.neg(ad.meant(picked))


def total_loss(main: Tensor, aux: Tensor | None, aux_coef: float) -> Tensor:
    """main + aux_coef * max(aux - 1, 0): a perfectly balanced router adds zero."""
    if not np.isfinite(main.data):
        raise ad.NumericsError("total_loss: non-finite main term")
    if aux is None or aux_coef == 0.0:
        return main
    if not np.isfinite(aux.data):
        raise ad.NumericsError("total_loss: non-finite aux term")
    return ad.add(main, ad.mul(ad.relu(ad.sub(aux, 1.0)), aux_coef))


# ---------------------------------------------------------------------------
# schedules


def cosine_lr(step: int, cfg: DistillConfig) -> float:
    """Linear warmup 0 -> lr_peak, then cosine decay to the floor; clamps past the end."""
    floor = cfg.lr_peak * cfg.lr_floor_ratio
    if step < 0:
        raise DistillError(f"negative step {step}")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return floor
    t = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return floor + (cfg.lr_peak - floor) * 0.5 * (1.0 + np.cos(np.pi * t))


def plateau_early_stop(history: Iterable[float], window: int, eps: float) -> bool:
    """True once the mean of the last window improves on the previous window's
    mean by less than eps (relative). Needs two full windows of history."""
    h = list(history)
    if len(h) < 2 * window:
        return False
    cur = float(np.mean(h[-window:]))
    prev = float(np.mean(h[-2 * window:-window]))
    if prev == 0.0:
        return True
    return (prev - cur) / abs(prev) < eps


# ---------------------------------------------------------------------------
# optimizer state and step


@dataclass
class TrainState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)
    rng: np.random.Generator = None

    @classmethod
    def fresh(cls, model: Model, seed: int) -> "TrainState":
        m = {name: np.zeros_like(p.tensor.data) for name, p in model.registry.items()}
        v = {name: np.zeros_like(p.tensor.data) for name, p in model.registry.items()}
        return cls(0, m, v, [], np.random.default_rng(seed))


def adamw_update(state: TrainState, model: Model, grads: dict[str, np.ndarray],
                 lr: float, cfg: DistillConfig) -> None:
    """Adaptive-moment update with decoupled weight decay (decay scaled by lr)."""
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in model.registry.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        w = p.tensor.data
        if cfg.weight_decay:
            w -= lr * cfg.weight_decay * w
        w -= lr * update


@dataclass
class StepResult:
    loss: float
    aux: float
    lr: float


def distill_step(state: TrainState, model: Model, batch: np.ndarray, cfg: DistillConfig,
                 cache_slice: tuple[np.ndarray, np.ndarray] | None = None,
                 targets: np.ndarray | None = None,
                 masks=None) -> StepResult:
    """One forward/backward/update. Exactly one of cache_slice (KD) or targets
    (CLM) must be given. A non-finite loss aborts before any state mutation."""
    if (cache_slice is None) == (targets is None):
        raise DistillError("pass exactly one of cache_slice or targets")
    b, n = batch.shape
    lr = cosine_lr(state.step, cfg)
    with Tape() as tape:
        logits, stats = forward_batch(model, batch, masks)
        flat = ad.reshape(logits, (b * n, model.config.vocab_size))
        if cache_slice is not None:
            idx, probs = cache_slice
            main = kd_topk_loss(idx, probs, flat)
        else:
            keep = (np.arange(b * n) + 1) % n != 0  # drop each sequence's last position
            picked = ad.take_rows(flat, np.nonzero(keep)[0])
            main = clm_loss(picked, targets.reshape(-1))
        aux = aux_load_balance(stats) if stats else None
        loss = total_loss(main, aux, cfg.aux_coef)
    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise TrainAbort(f"non-finite loss at step {state.step}")
    grads = backward(tape, loss, model.registry.tensor_map())
    adamw_update(state, model, grads, lr, cfg)
    state.step += 1
    state.loss_history.append(loss_val)
    del state.loss_history[:-max(256, 4 * cfg.plateau_window)]
    return StepResult(loss_val, float(aux.data) if aux is not None else 0.0, lr)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLogRow:
    step: int
    tokens: int
    train_loss: float
    eval_loss: float
    aux: float
    lr: float
    stage: int
    eval_acc: float = 0.0  # carried for reports; not part of the metrics.csv schema


def run_training(model: Model, train_seqs: np.ndarray, eval_seqs: np.ndarray,
                 cfg: DistillConfig, *, seed: int | None = None,
                 data_rng: np.random.Generator | None = None,
                 cache: TeacherCache | None = None,
                 stage: int = 0, stop_rule: str = "budget", tokens_offset: int = 0,
                 masks=None, mask_callback=None) -> tuple[int, list[TrainLogRow], list[float]]:
    """Train for cfg.total_steps (or until plateau). KD mode when a cache is
    given, CLM otherwise. Returns (tokens consumed, log rows, eval-loss history).

    Batch sampling draws from `data_rng` when given (lets multi-stage runs keep
    one continuous data stream across stages), else from a stream seeded by
    `seed`. mask_callback(step) -> masks lets the iterative baseline tighten
    masks mid-run; it is consulted before each step.
    """
    if stop_rule not in ("budget", "plateau"):
        raise DistillError(f"unknown stop rule {stop_rule!r}")
    if (seed is None) == (data_rng is None):
        raise DistillError("pass exactly one of seed or data_rng")
    seqs_per_batch = max(1, cfg.batch_tokens // train_seqs.shape[1])
    state = TrainState.fresh(model, 0 if seed is None else seed)
    if data_rng is not None:
        state.rng = data_rng
    rows: list[TrainLogRow] = []
    eval_hist: list[float] = []
    tokens = 0
    eval_subset = eval_seqs[:cfg.eval_seqs]
    for step in range(cfg.total_steps):
        if mask_callback is not None:
            masks = mask_callback(step)
        picks = state.rng.integers(0, train_seqs.shape[0], size=seqs_per_batch)
        batch = train_seqs[picks]
        if cache is not None:
            idx, probs = cache.slice(picks)
            res = distill_step(state, model, batch, cfg,
                               cache_slice=(idx.reshape(-1, cache.k), probs.reshape(-1, cache.k)),
                               masks=masks)
        else:
            res = distill_step(state, model, batch, cfg, targets=batch[:, 1:], masks=masks)
        tokens += batch.size
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps:
            ce, acc = _masked_evaluate(model, eval_subset, masks)
            eval_hist.append(ce)
            rows.append(TrainLogRow(step + 1, tokens_offset + tokens, res.loss, ce,
                                    res.aux, res.lr, stage, acc))
            if stop_rule == "plateau" and plateau_early_stop(
                    eval_hist, cfg.plateau_window, cfg.plateau_eps):
                break
    return tokens, rows, eval_hist


def _masked_evaluate(model: Model, eval_seqs: np.ndarray, masks) -> tuple[float, float]:
    if masks is None:
        return evaluate(model, eval_seqs)
    # evaluate through the mask view so masked runs report their active model
    seqs = np.asarray(eval_seqs)
    ce_sum = 0.0
    correct = 0
    total = 0
    for start in range(0, seqs.shape[0], 32):
        batch = seqs[start:start + 32]
        logits, _ = forward_batch(model, batch, masks)
        ls = ad.log_softmax(logits, axis=-1).data
        targets = batch[:, 1:]
        picked = np.take_along_axis(ls[:, :-1, :], targets[:, :, None], axis=2)[:, :, 0]
        ce_sum += float(-picked.sum())
        correct += int((ls[:, :-1, :].argmax(axis=-1) == targets).sum())
        total += targets.size
    return ce_sum / total, correct / total
