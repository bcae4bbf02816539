"""Configurable MoE transformer (plus a dense-FFN variant) with a pruning-aware
parameter registry.

Block layout: embed -> [RMS pre-norm, grouped-query attention with rotary q/k,
residual, RMS pre-norm, MoE (or GLU FFN), residual] x n_layer -> RMS norm,
unembed. The registry is the single source of structural truth: every
trainable tensor lives there exactly once, and pruning edits go through it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

RMS_EPS = 1e-6
ROPE_BASE = 10000.0
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int
    n_head_q: int
    n_head_kv: int
    d_head: int
    d_expert: int
    n_layer: int
    n_expert: int
    top_k: int
    vocab_size: int
    max_seq_len: int
    arch_kind: str = "moe"
    d_ffn: int = 0  # dense_ffn only

    def __post_init__(self):
        if self.arch_kind not in ("moe", "dense_ffn"):
            raise ConfigError(f"unknown arch_kind {self.arch_kind!r}")
        dims = [self.d_model, self.n_head_q, self.n_head_kv, self.d_head, self.n_layer,
                self.vocab_size, self.max_seq_len]
        if self.arch_kind == "moe":
            dims += [self.d_expert, self.n_expert, self.top_k]
        else:
            dims += [self.d_ffn]
        if any(d < 1 for d in dims):
            raise ConfigError(f"all dimensions must be >= 1: {self}")
        if self.n_head_q % self.n_head_kv != 0:
            raise ConfigError(
                f"n_head_q={self.n_head_q} not divisible by n_head_kv={self.n_head_kv}")
        if self.d_head % 2 != 0:
            raise ConfigError("d_head must be even (rotary embedding pairs)")
        if self.arch_kind == "moe" and not (1 <= self.top_k <= self.n_expert):
            raise ConfigError(f"top_k={self.top_k} outside [1, n_expert={self.n_expert}]")

    @property
    def group_size(self) -> int:
        return self.n_head_q // self.n_head_kv

    @property
    def n_groups(self) -> int:
        return self.n_head_kv

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_head_q": self.n_head_q, "n_head_kv": self.n_head_kv,
            "d_head": self.d_head, "d_expert": self.d_expert, "n_layer": self.n_layer,
            "n_expert": self.n_expert, "top_k": self.top_k, "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len, "arch_kind": self.arch_kind, "d_ffn": self.d_ffn,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class PruneTag:
    """Which structural unit a tensor axis belongs to, if any."""
    kind: str  # expert_neuron | gqa_group | ffn_neuron | none
    layer: int | None = None
    expert: int | None = None
    axis: int | None = None

    @classmethod
    def none(cls) -> "PruneTag":
        return cls("none")


@dataclass
class Param:
    tensor: Tensor
    tag: PruneTag


class ParamRegistry:
    """Ordered map name -> Param; insertion order defines serialization order."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def register(self, name: str, tensor: Tensor, tag: PruneTag) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} registered twice")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = Param(tensor, tag)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensor_map(self) -> dict[str, Tensor]:
        return {name: p.tensor for name, p in self._params.items()}

    def param_count(self) -> int:
        return sum(p.tensor.size for p in self._params.values())


@dataclass
class ExpertWeights:
    w1: Tensor  # d_model x d_expert
    w2: Tensor  # d_model x d_expert
    w3: Tensor  # d_expert x d_model


@dataclass
class ExpertBank:
    """All experts of one layer, stacked: w1/w2 (n_expert, d_model, d_expert),
    w3 (n_expert, d_expert, d_model). Uniform slimming keeps the stack valid."""
    w1: Tensor
    w2: Tensor
    w3: Tensor


@dataclass
class AttentionWeights:
    wq: Tensor  # d_model x (n_head_q * d_head)
    wk: Tensor  # d_model x (n_head_kv * d_head)
    wv: Tensor  # d_model x (n_head_kv * d_head)
    wo: Tensor  # (n_head_q * d_head) x d_model


@dataclass
class LayerWeights:
    attn_norm: Tensor
    attn: AttentionWeights
    ffn_norm: Tensor
    router: Tensor | None  # d_model x n_expert (moe only)
    experts: ExpertBank | None = None
    ffn: ExpertWeights | None = None  # dense_ffn only


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    unembed: Tensor
    registry: ParamRegistry

    def clone(self) -> "Model":
        arrays = {name: p.tensor.data.copy() for name, p in self.registry.items()}
        return model_from_arrays(self.config, arrays)

    def param_count(self) -> int:
        return self.registry.param_count()


@dataclass
class ForwardMasks:
    """Zero-masks simulating structural pruning at forward time.

    neuron[layer]: (n_expert, d_expert) 0/1; head_dims[layer]: (n_head_q*d_head,) 0/1
    applied to the concatenated head outputs; expert_allowed[layer]: (n_expert,) bool
    for the router; ffn[layer]: (d_ffn,) 0/1.
    """
    neuron: dict[int, np.ndarray] = field(default_factory=dict)
    head_dims: dict[int, np.ndarray] = field(default_factory=dict)
    expert_allowed: dict[int, np.ndarray] = field(default_factory=dict)
    ffn: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class RoutingStats:
    counts: np.ndarray        # (n_expert,) top-k selection counts
    gate_mass: np.ndarray     # (n_expert,) summed gate weight
    probs_mean: Tensor        # (n_expert,) mean full-softmax router probability
    n_tokens: int
    top_k: int


def _build_structure(config: ModelConfig) -> Model:
    """Allocate zero-filled tensors and the registry in canonical order."""
    d, dh = config.d_model, config.d_head
    reg = ParamRegistry()

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=ad.default_dtype()))

    embed = reg.register("embed.w", zeros((config.vocab_size, d)), PruneTag.none())
    layers = []
    for i in range(config.n_layer):
        attn_norm = reg.register(f"layers.{i}.attn_norm.g", zeros((d,)), PruneTag.none())
        attn = AttentionWeights(
            wq=reg.register(f"layers.{i}.attn.wq", zeros((d, config.n_head_q * dh)),
                            PruneTag("gqa_group", layer=i, axis=1)),
            wk=reg.register(f"layers.{i}.attn.wk", zeros((d, config.n_head_kv * dh)),
                            PruneTag("gqa_group", layer=i, axis=1)),
            wv=reg.register(f"layers.{i}.attn.wv", zeros((d, config.n_head_kv * dh)),
                            PruneTag("gqa_group", layer=i, axis=1)),
            wo=reg.register(f"layers.{i}.attn.wo", zeros((config.n_head_q * dh, d)),
                            PruneTag("gqa_group", layer=i, axis=0)),
        )
        ffn_norm = reg.register(f"layers.{i}.ffn_norm.g", zeros((d,)), PruneTag.none())
        if config.arch_kind == "moe":
            router = reg.register(f"layers.{i}.router.wg", zeros((d, config.n_expert)),
                                  PruneTag.none())
            e, de = config.n_expert, config.d_expert
            bank = ExpertBank(
                w1=reg.register(f"layers.{i}.experts.w1", zeros((e, d, de)),
                                PruneTag("expert_neuron", layer=i, axis=2)),
                w2=reg.register(f"layers.{i}.experts.w2", zeros((e, d, de)),
                                PruneTag("expert_neuron", layer=i, axis=2)),
                w3=reg.register(f"layers.{i}.experts.w3", zeros((e, de, d)),
                                PruneTag("expert_neuron", layer=i, axis=1)),
            )
            layers.append(LayerWeights(attn_norm, attn, ffn_norm, router, bank))
        else:
            ffn = ExpertWeights(
                w1=reg.register(f"layers.{i}.ffn.w1", zeros((d, config.d_ffn)),
                                PruneTag("ffn_neuron", layer=i, axis=1)),
                w2=reg.register(f"layers.{i}.ffn.w2", zeros((d, config.d_ffn)),
                                PruneTag("ffn_neuron", layer=i, axis=1)),
                w3=reg.register(f"layers.{i}.ffn.w3", zeros((config.d_ffn, d)),
                                PruneTag("ffn_neuron", layer=i, axis=0)),
            )
            layers.append(LayerWeights(attn_norm, attn, ffn_norm, None, None, ffn))
    final_norm = reg.register("final_norm.g", zeros((d,)), PruneTag.none())
    unembed = reg.register("unembed.w", zeros((d, config.vocab_size)), PruneTag.none())
    return Model(config, embed, layers, final_norm, unembed, reg)


def init_model(config: ModelConfig, seed: int) -> Model:
    """Scaled-normal init, deterministic per seed.

    Residual-output matrices (wo, w3) use std 0.02/sqrt(2*n_layer); all other
    weight matrices use std 0.02; norm gains start at 1.
    """
    model = _build_structure(config)
    rng = np.random.default_rng(seed)
    std_res = INIT_STD / np.sqrt(2.0 * config.n_layer)
    dtype = ad.default_dtype()
    for name, p in model.registry.items():
        t = p.tensor
        if name.endswith("norm.g"):
            t.data = np.ones(t.shape, dtype=dtype)
        else:
            std = std_res if name.endswith((".wo", ".w3")) else INIT_STD
            t.data = (rng.normal(0.0, std, size=t.shape)).astype(dtype)
    return model


def model_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Model:
    """Assemble a model from named arrays (checkpoint load, structural edits)."""
    model = _build_structure(config)
    expected = set(model.registry.names())
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ConfigError(f"array set mismatch: missing={missing[:4]} extra={extra[:4]}")
    for name, p in model.registry.items():
        arr = arrays[name]
        if tuple(arr.shape) != p.tensor.shape:
            raise ConfigError(
                f"shape mismatch for {name}: got {arr.shape}, config implies {p.tensor.shape}")
        p.tensor.data = np.ascontiguousarray(arr)
    return model


def fingerprint(model: Model) -> int:
    """64-bit content hash over parameter names and bytes (cache validation)."""
    h = hashlib.sha256()
    for name, p in model.registry.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.tensor.data).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


# ---------------------------------------------------------------------------
# closed-form parameter counts


def param_count(config: ModelConfig) -> int:
    d, dh = config.d_model, config.d_head
    attn = d * config.n_head_q * dh + 2 * d * config.n_head_kv * dh + config.n_head_q * dh * d
    if config.arch_kind == "moe":
        ffn = d * config.n_expert + config.n_expert * 3 * d * config.d_expert
    else:
        ffn = 3 * d * config.d_ffn
    per_layer = 2 * d + attn + ffn
    return 2 * config.vocab_size * d + config.n_layer * per_layer + d


def active_param_count(config: ModelConfig) -> int:
    """Parameters touched per token: embeddings, attention, router, top-k experts."""
    d, dh = config.d_model, config.d_head
    attn = d * config.n_head_q * dh + 2 * d * config.n_head_kv * dh + config.n_head_q * dh * d
    if config.arch_kind == "moe":
        ffn = d * config.n_expert + config.top_k * 3 * d * config.d_expert
    else:
        ffn = 3 * d * config.d_ffn
    per_layer = 2 * d + attn + ffn
    return 2 * config.vocab_size * d + config.n_layer * per_layer + d


# ---------------------------------------------------------------------------
# forward pieces

_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(n: int, d_head: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (n, d_head, np.dtype(dtype).str)
    tab = _ROPE_CACHE.get(key)
    if tab is None:
        half = d_head // 2
        inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
        ang = np.arange(n, dtype=np.float64)[:, None] * inv_freq[None, :]
        tab = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
        _ROPE_CACHE[key] = tab
    return tab


def _apply_rope(x: Tensor, n: int, d_head: int) -> Tensor:
    """Rotate query/key head vectors by position. x: (B*H, N, d_head)."""
    cos, sin = _rope_tables(n, d_head, x.data.dtype)
    return ad.rope_rotate(x, cos, sin)


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    return ad.rms_scale(x, gain, RMS_EPS)


def _glu(x: Tensor, w: ExpertWeights, hidden_mask: np.ndarray | None = None) -> Tensor:
    """Gated linear unit: (GELU(x W1) * x W2) W3, optionally masking hidden units."""
    h = ad.glu_hidden(x, w.w1, w.w2)
    if hidden_mask is not None:
        h = ad.mul(h, hidden_mask)
    return ad.matmul(h, w.w3)


def expert_weights(model: Model, layer: int, e: int) -> ExpertWeights:
    """One expert's (d_model x d_expert, ..., d_expert x d_model) triple as
    taped slices of the layer's stacked bank."""
    lw = model.layers[layer]
    if lw.experts is None:
        raise ConfigError("expert_weights requires an moe model")
    if not 0 <= e < model.config.n_expert:
        raise IndexError(f"expert index {e} out of range for layer {layer}")
    d, de = model.config.d_model, model.config.d_expert

    def take(bank, shape):
        return ad.reshape(ad.narrow(bank, 0, e, 1), shape)

    return ExpertWeights(take(lw.experts.w1, (d, de)), take(lw.experts.w2, (d, de)),
                         take(lw.experts.w3, (de, d)))


def expert_forward(model: Model, x, e: int, layer: int) -> Tensor:
    """Run one expert on a single d_model vector."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.shape != (model.config.d_model,):
        raise ad.ShapeError("expert_forward", xt.shape, (model.config.d_model,))
    out = _glu(ad.reshape(xt, (1, model.config.d_model)), expert_weights(model, layer, e))
    return ad.reshape(out, (model.config.d_model,))


def route(model: Model, x, layer: int) -> tuple[np.ndarray, Tensor]:
    """Top-k expert indices for one token plus softmax gates over the selected logits."""
    lw = model.layers[layer]
    if lw.router is None:
        raise ConfigError("route() requires an moe model")
    xt = x if isinstance(x, Tensor) else Tensor(x)
    logits = ad.matmul(ad.reshape(xt, (1, model.config.d_model)), lw.router)
    idx = ad.topk_indices(logits.data[0], model.config.top_k)
    sel = ad.gather_elements(logits, np.zeros(len(idx), dtype=np.int64), idx)
    gates = ad.softmax(sel, axis=-1)
    return idx, gates


def moe_layer_forward(model: Model, X: Tensor | np.ndarray, layer: int,
                      masks: ForwardMasks | None = None) -> tuple[Tensor, RoutingStats]:
    """MoE layer over a token matrix X (n_tokens, d_model)."""
    xt = X if isinstance(X, Tensor) else Tensor(X)
    return _moe_block(model, xt, layer, masks)


def _moe_block(model: Model, x: Tensor, layer: int,
               masks: ForwardMasks | None) -> tuple[Tensor, RoutingStats]:
    cfg = model.config
    lw = model.layers[layer]
    n_tokens = x.shape[0]
    if n_tokens < 1:
        raise ad.ShapeError("moe_layer_forward", x.shape, detail="needs at least one token")

    logits = ad.matmul(x, lw.router)
    if masks is not None and layer in masks.expert_allowed:
        blocked = ~masks.expert_allowed[layer]
        logits = ad.masked_fill(logits, blocked[None, :])
    probs_mean = ad.meant(ad.softmax(logits, axis=-1), axis=0)

    idx = ad.topk_indices(logits.data, cfg.top_k, axis=-1)  # (n_tokens, k), detached
    rows = np.repeat(np.arange(n_tokens), cfg.top_k)
    sel = ad.reshape(ad.gather_elements(logits, rows, idx.reshape(-1)), (n_tokens, cfg.top_k))
    gates = ad.softmax(sel, axis=-1)

    # every expert runs the full token matrix; non-selected gates are exact zeros,
    # so this equals the routed dispatch value-for-value
    h = ad.glu_hidden(x, lw.experts.w1, lw.experts.w2)  # (n_expert, n_tokens, d_expert)
    if masks is not None and layer in masks.neuron:
        h = ad.mul(h, masks.neuron[layer][:, None, :])
    y = ad.bmm(h, lw.experts.w3)  # (n_expert, n_tokens, d_model)
    gate_mat = ad.scatter_elements(gates, rows, idx.reshape(-1),
                                   (n_tokens, cfg.n_expert))
    weights = ad.reshape(ad.transpose(gate_mat, (1, 0)), (cfg.n_expert, n_tokens, 1))
    out = ad.sumt(ad.mul(y, weights), axis=0)

    counts = np.bincount(idx.reshape(-1), minlength=cfg.n_expert).astype(np.int64)
    gate_mass = gate_mat.data.sum(axis=0)
    stats = RoutingStats(counts, gate_mass, probs_mean, n_tokens, cfg.top_k)
    return out, stats


def gqa_forward(model: Model, X: Tensor | np.ndarray, layer: int,
                masks: ForwardMasks | None = None) -> Tensor:
    """Causal grouped-query attention over X (N, d_model) as one sequence."""
    xt = X if isinstance(X, Tensor) else Tensor(X)
    n = xt.shape[0]
    if n > model.config.max_seq_len:
        raise ConfigError(f"sequence length {n} exceeds max_seq_len {model.config.max_seq_len}")
    return _attention_block(model, xt, layer, batch=1, seq=n, masks=masks)


def _attention_block(model: Model, x: Tensor, layer: int, batch: int, seq: int,
                     masks: ForwardMasks | None) -> Tensor:
    cfg = model.config
    lw = model.layers[layer]
    dh, hq, hkv = cfg.d_head, cfg.n_head_q, cfg.n_head_kv

    def to_heads(t: Tensor, n_heads: int) -> Tensor:
        t = ad.reshape(t, (batch, seq, n_heads, dh))
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (batch * n_heads, seq, dh))

    q = _apply_rope(to_heads(ad.matmul(x, lw.attn.wq), hq), seq, dh)
    k = _apply_rope(to_heads(ad.matmul(x, lw.attn.wk), hkv), seq, dh)
    v = to_heads(ad.matmul(x, lw.attn.wv), hkv)

    # query head h reads KV head h // group_size
    kv_map = (np.arange(batch)[:, None] * hkv
              + np.arange(hq)[None, :] // cfg.group_size).reshape(-1)
    k = ad.take_rows(k, kv_map)
    v = ad.take_rows(v, kv_map)

    scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    probs = ad.causal_softmax(scores)
    ctx = ad.bmm(probs, v)  # (batch*hq, seq, dh)

    ctx = ad.reshape(ctx, (batch, hq, seq, dh))
    ctx = ad.transpose(ctx, (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (batch * seq, hq * dh))
    if masks is not None and layer in masks.head_dims:
        ctx = ad.mul(ctx, masks.head_dims[layer])
    return ad.matmul(ctx, lw.attn.wo)


def forward_batch(model: Model, tokens: np.ndarray,
                  masks: ForwardMasks | None = None) -> tuple[Tensor, list[RoutingStats]]:
    """Forward a (batch, seq) id matrix; returns logits (batch, seq, vocab) and
    per-layer routing stats (empty list for dense models)."""
    cfg = model.config
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, n = ids.shape
    if n > cfg.max_seq_len:
        raise ConfigError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ConfigError(
            f"token ids outside [0, {cfg.vocab_size}): min={ids.min()} max={ids.max()}")

    h = ad.embedding(model.embed, ids.reshape(-1))  # (b*n, d_model)
    stats: list[RoutingStats] = []
    for i, lw in enumerate(model.layers):
        a = rms_norm(h, lw.attn_norm)
        h = ad.add(h, _attention_block(model, a, i, b, n, masks))
        f = rms_norm(h, lw.ffn_norm)
        if cfg.arch_kind == "moe":
            moe_out, layer_stats = _moe_block(model, f, i, masks)
            stats.append(layer_stats)
            h = ad.add(h, moe_out)
        else:
            fmask = masks.ffn.get(i) if masks is not None else None
            h = ad.add(h, _glu(f, lw.ffn, fmask))
    h = rms_norm(h, model.final_norm)
    logits = ad.matmul(h, model.unembed)
    return ad.reshape(logits, (b, n, cfg.vocab_size)), stats


def model_forward(model: Model, tokens: np.ndarray,
                  masks: ForwardMasks | None = None) -> tuple[Tensor, list[RoutingStats]]:
    """Forward a single token sequence; returns logits (N, vocab) and routing stats."""
    ids = np.asarray(tokens)
    if ids.ndim != 1:
        raise ConfigError(f"model_forward expects a 1-D token sequence, got shape {ids.shape}")
    logits, stats = forward_batch(model, ids[None, :], masks)
    return ad.reshape(logits, (ids.shape[0], model.config.vocab_size)), stats


def aux_load_balance(stats) -> Tensor:
    """Switch-style balance penalty: n_expert * sum_e f_e * P_e.

    f_e is the fraction of top-k selections routed to expert e (detached) and
    P_e the mean full-softmax router probability (differentiable). Equals 1 at
    perfect uniformity. A list of per-layer stats is averaged.
    """
    if isinstance(stats, (list, tuple)):
        if not stats:
            raise ValueError("aux_load_balance: no routing stats")
        terms = [aux_load_balance(s) for s in stats]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.mul(total, 1.0 / len(terms))
    if stats.n_tokens < 1:
        raise ValueError("aux_load_balance: empty routing stats")
    n_expert = stats.counts.shape[0]
    f = stats.counts.astype(np.float64) / (stats.n_tokens * stats.top_k)
    return ad.mul(ad.sumt(ad.mul(stats.probs_mean, f)), float(n_expert))
