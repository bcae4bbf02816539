"""Synthetic corpora for training and evaluating the desk-scale models.

Train and eval splits come from separately spawned RNG streams, so they are
disjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASK_KINDS = ("markov_chars", "copy_memory", "modular_arithmetic")
_MIN_VOCAB = {"markov_chars": 2, "copy_memory": 3, "modular_arithmetic": 2}

MARKOV_DIRICHLET_ALPHA = 0.3  # low-entropy rows keep the chain learnable


class TaskError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str
    vocab_size: int
    seq_len: int
    train_tokens: int
    eval_tokens: int
    seed: int

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < _MIN_VOCAB[self.kind]:
            raise TaskError(
                f"vocab_size {self.vocab_size} too small for {self.kind} "
                f"(needs >= {_MIN_VOCAB[self.kind]})")
        if self.seq_len < 3 or self.train_tokens < 1 or self.eval_tokens < 1:
            raise TaskError(f"degenerate task spec: {self}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "vocab_size": self.vocab_size, "seq_len": self.seq_len,
                "train_tokens": self.train_tokens, "eval_tokens": self.eval_tokens,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class Corpus:
    spec: TaskSpec
    train: np.ndarray  # (n_train_seqs, seq_len) int64
    eval: np.ndarray   # (n_eval_seqs, seq_len) int64
    chain: np.ndarray | None = None  # markov transition tensor, for analysis


def _n_seqs(tokens: int, seq_len: int) -> int:
    return max(1, -(-tokens // seq_len))


def markov_transition(vocab_size: int, rng: np.random.Generator) -> np.ndarray:
    """Order-2 transition tensor T[prev2, prev1] -> next-token distribution."""
    alpha = np.full(vocab_size, MARKOV_DIRICHLET_ALPHA)
    return rng.dirichlet(alpha, size=(vocab_size, vocab_size))


def sample_markov(chain: np.ndarray, n_seqs: int, seq_len: int,
                  rng: np.random.Generator) -> np.ndarray:
    v = chain.shape[0]
    seqs = np.empty((n_seqs, seq_len), dtype=np.int64)
    seqs[:, :2] = rng.integers(0, v, size=(n_seqs, 2))
    for t in range(2, seq_len):
        probs = chain[seqs[:, t - 2], seqs[:, t - 1]]
        cs = probs.cumsum(axis=1)
        u = rng.random((n_seqs, 1))
        nxt = (cs > u).argmax(axis=1)
        nxt[cs[:, -1] <= u[:, 0]] = v - 1  # cumsum rounding guard
        seqs[:, t] = nxt
    return seqs


def _sample_copy(spec: TaskSpec, n_seqs: int, rng: np.random.Generator) -> np.ndarray:
    # [payload(m), SEP, payload(m), SEP padding]; SEP = 0, payload in 1..V-1
    m = (spec.seq_len - 1) // 2
    payload = rng.integers(1, spec.vocab_size, size=(n_seqs, m))
    seqs = np.zeros((n_seqs, spec.seq_len), dtype=np.int64)
    seqs[:, :m] = payload
    seqs[:, m + 1:2 * m + 1] = payload
    return seqs


def _sample_modular(spec: TaskSpec, n_seqs: int, rng: np.random.Generator) -> np.ndarray:
    # packed [a, b, (a+b) mod p] triples; p = vocab_size
    p = spec.vocab_size
    n_probs = -(-spec.seq_len // 3)
    a = rng.integers(0, p, size=(n_seqs, n_probs))
    b = rng.integers(0, p, size=(n_seqs, n_probs))
    triples = np.stack([a, b, (a + b) % p], axis=2).reshape(n_seqs, -1)
    return triples[:, :spec.seq_len]


def copy_answer_span(spec: TaskSpec) -> tuple[int, int]:
    """Positions whose next token is a forced copy: [start, stop) predicting payload."""
    m = (spec.seq_len - 1) // 2
    return m, 2 * m


def gen_synthetic_corpus(spec: TaskSpec) -> Corpus:
    """Deterministic per seed; train/eval drawn from independent spawned streams."""
    chain_ss, train_ss, eval_ss = np.random.SeedSequence(spec.seed).spawn(3)
    train_rng = np.random.default_rng(train_ss)
    eval_rng = np.random.default_rng(eval_ss)
    n_train = _n_seqs(spec.train_tokens, spec.seq_len)
    n_eval = _n_seqs(spec.eval_tokens, spec.seq_len)
    chain = None
    if spec.kind == "markov_chars":
        chain = markov_transition(spec.vocab_size, np.random.default_rng(chain_ss))
        train = sample_markov(chain, n_train, spec.seq_len, train_rng)
        evals = sample_markov(chain, n_eval, spec.seq_len, eval_rng)
    elif spec.kind == "copy_memory":
        train = _sample_copy(spec, n_train, train_rng)
        evals = _sample_copy(spec, n_eval, eval_rng)
    else:
        train = _sample_modular(spec, n_train, train_rng)
        evals = _sample_modular(spec, n_eval, eval_rng)
    return Corpus(spec, train, evals, chain)


def save_corpus(corpus: Corpus, path) -> None:
    np.savez(path, train=corpus.train, eval=corpus.eval,
             chain=corpus.chain if corpus.chain is not None else np.zeros(0),
             meta=np.array(list(corpus.spec.to_dict().items()), dtype=object))


def load_corpus(path) -> Corpus:
    with np.load(path, allow_pickle=True) as z:
        meta = dict(z["meta"].tolist())
        spec = TaskSpec(kind=str(meta["kind"]), vocab_size=int(meta["vocab_size"]),
                        seq_len=int(meta["seq_len"]), train_tokens=int(meta["train_tokens"]),
                        eval_tokens=int(meta["eval_tokens"]), seed=int(meta["seed"]))
        chain = z["chain"]
        return Corpus(spec, z["train"], z["eval"], chain if chain.size else None)
