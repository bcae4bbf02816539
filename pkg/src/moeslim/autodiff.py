"""Dense-tensor algebra with reverse-mode automatic differentiation.

Arrays are plain numpy; every differentiable op records a node on the
active Tape, and backward() replays the tape in reverse, accumulating
gradients. Single-threaded semantics: same seed, same tape, bit-identical
gradients across runs.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Fill value for masked logits: finite (keeps the all-finite invariant) but
# large enough that exp() underflows to exactly 0 after max subtraction.
MASK_FILL = -1e30

_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True
_ACTIVE_TAPE: "Tape | None" = None


class ShapeError(ValueError):
    """Operands with incompatible shapes; names the op and the shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        msg = f"{op}: incompatible shapes {[tuple(s) for s in shapes]}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NumericsError(FloatingPointError):
    """A forward op produced (or was fed) non-finite values."""


class TapeError(RuntimeError):
    """Backward misuse: consumed tape, off-tape loss, non-scalar loss."""


def set_default_dtype(dtype) -> None:
    """Set the dtype for newly created tensors (float64 test mode, float32 pipeline mode)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A dense array plus grad metadata. `data` is always a numpy ndarray."""

    __slots__ = ("data", "requires_grad", "name", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; constants stay raw numpy scalars
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops; topological by construction.

    Use as a context manager around the forward pass; one backward per tape.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)


def _recording() -> bool:
    return _ACTIVE_TAPE is not None


def _make(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, enforce finiteness, and record it on the active tape."""
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericsError(f"{op}: non-finite values in result")
    rg = _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, rg)
    if rg:
        _ACTIVE_TAPE._nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _const(x) -> np.ndarray | None:
    """Return x as raw numpy if it is a plain constant, else None."""
    if isinstance(x, Tensor):
        return None
    return np.asarray(x)


# ---------------------------------------------------------------------------
# element-wise arithmetic (numpy broadcasting allowed)


def add(a: Tensor, b) -> Tensor:
    c = _const(b)
    if c is not None:
        return _make("add", a.data + c, (a,), lambda g: (_unbroadcast(g, a.shape),))
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    c = _const(b)
    if c is not None:
        return _make("sub", a.data - c, (a,), lambda g: (_unbroadcast(g, a.shape),))
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    c = _const(b)
    if c is not None:
        return _make("mul", a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    ad, bd = a.data, b.data
    return _make(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    c = _const(b)
    if c is not None:
        return _make("div", a.data / c, (a,), lambda g: (_unbroadcast(g / c, a.shape),))
    ad, bd = a.data, b.data
    return _make(
        "div",
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def powt(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make("pow", ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _make("relu", np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),))


def gelu(a: Tensor) -> Tensor:
    """Exact erf-form GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return _make("gelu", x * phi, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError("bmm", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        "bmm",
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g),
    )


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# reductions


def sumt(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ashape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ashape).copy(),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def meant(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ashape = a.shape
    n = a.data.size if axis is None else np.prod([ashape[ax] for ax in np.atleast_1d(axis)])

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, ashape).copy(),)

    return _make("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def l2norm(a: Tensor, axis: int) -> Tensor:
    """Row/column l2 norms along `axis`. Gradient is undefined at exact zeros."""
    nrm = np.sqrt((a.data**2).sum(axis=axis))
    ad = a.data

    def bwd(g):
        ge = np.expand_dims(g / nrm, axis)
        return (ge * ad,)

    return _make("l2norm", nrm, (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    s = np.exp(x - x.max(axis=axis, keepdims=True))
    s /= s.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make("softmax", s, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-softmax; stable for logit magnitudes up to ~1e4 and beyond."""
    x = a.data
    if np.isnan(x).any():
        raise NumericsError("log_softmax: NaN in input logits")
    shifted = x - x.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        p = np.exp(ls)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", ls, (a,), bwd)


# ---------------------------------------------------------------------------
# structure: concat / slice / gather / scatter / masking


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", a.shape, detail=f"axis={axis} start={start} length={length}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    ashape = a.shape

    def bwd(g):
        gz = np.zeros(ashape, dtype=g.dtype)
        gz[idx] = g
        return (gz,)

    return _make("narrow", a.data[idx].copy(), (a,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0; duplicate indices allowed (grads accumulate)."""
    idx = np.asarray(idx)
    ashape = a.shape

    def bwd(g):
        gz = np.zeros(ashape, dtype=g.dtype)
        np.add.at(gz, idx, g)
        return (gz,)

    return _make("take_rows", a.data[idx], (a,), bwd)


def scatter_rows(src: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of src at positions idx in a zero tensor of n_rows rows. idx must be unique."""
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    out[idx] = src.data
    return _make("scatter_rows", out, (src,), lambda g: (g[idx],))


def scatter_elements(src: Tensor, rows: np.ndarray, cols: np.ndarray,
                     shape: tuple[int, int]) -> Tensor:
    """Place src[i] at out[rows[i], cols[i]] in a zero matrix; pairs must be unique."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = np.zeros(shape, dtype=src.data.dtype)
    out[rows, cols] = src.data.reshape(-1)
    sshape = src.shape

    def bwd(g):
        return (g[rows, cols].reshape(sshape),)

    return _make("scatter_elements", out, (src,), bwd)


def gather_elements(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick a2d[rows[i], cols[i]] for each i; grads scatter-add back."""
    if a.data.ndim != 2:
        raise ShapeError("gather_elements", a.shape, detail="expects a 2-D tensor")
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    ashape = a.shape

    def bwd(g):
        gz = np.zeros(ashape, dtype=g.dtype)
        np.add.at(gz, (rows, cols), g)
        return (gz,)

    return _make("gather_elements", a.data[rows, cols], (a,), bwd)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    wshape = weight.shape

    def bwd(g):
        gz = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gz, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (gz,)

    return _make("embedding", weight.data[ids], (weight,), bwd)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    """Replace entries where mask is True by `value` (value gets no gradient)."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, a.data)
    except ValueError as e:
        raise ShapeError("masked_fill", a.shape, mask.shape, detail=str(e)) from None

    def bwd(g):
        return (_unbroadcast(np.where(mask, 0.0, g), a.shape),)

    return _make("masked_fill", out, (a,), bwd)


# ---------------------------------------------------------------------------
# fused blocks (single tape node each; keeps tiny-model op counts down)


def rms_scale(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """RMS normalization with a learned gain: x * (mean(x^2) + eps)^-1/2 * gain."""
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    m = (xd * xd).mean(axis=-1, keepdims=True) + eps
    r = m ** -0.5
    out = xd * r * gd

    def bwd(g):
        gg = g * gd
        dot = (gg * xd).sum(axis=-1, keepdims=True)
        gx = gg * r - xd * (m ** -1.5 / d) * dot
        ggain = (g * xd * r).reshape(-1, d).sum(axis=0)
        return (gx, ggain)

    return _make("rms_scale", out, (x, gain), bwd)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position mix over head-dim halves. x: (..., N, d_head), tables (N, d_head/2)."""
    xd = x.data
    half = xd.shape[-1] // 2
    a = xd[..., :half]
    b = xd[..., half:]
    out = np.concatenate([a * cos - b * sin, b * cos + a * sin], axis=-1)

    def bwd(g):
        ga = g[..., :half]
        gb = g[..., half:]
        return (np.concatenate([ga * cos + gb * sin, gb * cos - ga * sin], axis=-1),)

    return _make("rope_rotate", out, (x,), bwd)


def glu_hidden(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Gated hidden activation: GELU(x @ w1) * (x @ w2).

    x is (n, d); the weights are (d, k) or a stacked bank (E, d, k), in which
    case the result is (E, n, k) with x broadcast across the bank.
    """
    if x.data.ndim != 2 or x.shape[1] != w1.shape[-2] or w1.shape != w2.shape:
        raise ShapeError("glu_hidden", x.shape, w1.shape, w2.shape)
    xd, w1d, w2d = x.data, w1.data, w2.data
    u = xd @ w1d
    v = xd @ w2d
    phi = 0.5 * (1.0 + erf(u * _INV_SQRT2))
    gu = u * phi
    banked = w1d.ndim == 3

    def bwd(g):
        dgu = g * v
        dv = g * gu
        du = dgu * (phi + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI)
        dx = du @ w1d.swapaxes(-1, -2) + dv @ w2d.swapaxes(-1, -2)
        if banked:
            dx = dx.sum(axis=0)
        return (dx, xd.T @ du, xd.T @ dv)

    return _make("glu_hidden", gu * v, (x, w1, w2), bwd)


_CAUSAL_MASKS: dict[int, np.ndarray] = {}


def causal_softmax(scores: Tensor) -> Tensor:
    """Row softmax over the causal prefix; future positions get exactly zero."""
    sd = scores.data
    n = sd.shape[-1]
    mask = _CAUSAL_MASKS.get(n)
    if mask is None:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        _CAUSAL_MASKS[n] = mask
    shifted = np.where(mask, MASK_FILL, sd)
    shifted -= shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)  # masked entries underflow to exactly 0
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make("causal_softmax", p, (scores,), bwd)


# ---------------------------------------------------------------------------
# non-differentiable utilities


def topk_indices(x: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the k largest entries, value-descending; ties go to the lower index."""
    x = np.asarray(x)
    k = min(k, x.shape[axis])
    order = np.argsort(-x, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


# ---------------------------------------------------------------------------
# reverse pass


def backward(
    tape: Tape,
    loss: Tensor,
    params: Mapping[str, Tensor] | None = None,
) -> dict[str, np.ndarray]:
    """Run reverse-mode accumulation over `tape` from scalar `loss`.

    Returns a gradient map for `params` (name -> array); parameters not
    reachable from the loss get zero gradients. Also sets `.grad` on every
    reached requires_grad tensor.
    """
    if loss.shape != ():
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    if not loss.requires_grad:
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] += gi
            else:
                grads[key] = np.array(gi, copy=True)

    result: dict[str, np.ndarray] = {}
    if params is not None:
        for name, p in params.items():
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            p.grad = g
            result[name] = g
    return result
