"""Minimal reverse-mode automatic differentiation over numpy arrays.

Define-by-run: every operation on Tensors records its parents and a
backward closure; backward() on a scalar loss walks the record in reverse
topological order. Working precision is float32 with a float64 mode for
finite-difference checks. The op set is exactly what the model needs, no
more: matmul, elementwise arithmetic, layer norm, GELU/ReLU, embedding
lookup, concatenation, masked fill, (log-)softmax, cross-entropy, BCE with
logits, reductions, stop-gradient and straight-through, plus the
max-stabilized attention and Gumbel-softmax sampling.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def default_dtype():
    return _DTYPE


@contextmanager
def use_dtype(dtype):
    """Switch working precision (float64 for gradient checks)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = old


@contextmanager
def no_grad():
    """Skip tape recording; forward values only (inference fast path)."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def set_debug_checks(enabled: bool) -> None:
    """Assert finite forward values after every op (slow; for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        if self.data.ndim > 4:
            raise ValueError(f"tensors support at most 4 axes, got {self.data.ndim}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None
        if _DEBUG_CHECKS and not np.isfinite(self.data).all():
            raise FloatingPointError("non-finite forward value")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=np.float64 if self.data.dtype == np.float64 else _DTYPE)
        self.grad = self.grad + g

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, a=-2, b=-1):
        return transpose(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def parameter(array, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Learnable leaf. Pass a shape tuple with rng for scaled-normal init."""
    if isinstance(array, tuple):
        fan_in = array[-1] if len(array) > 1 else array[0]
        s = scale if scale is not None else 1.0 / math.sqrt(fan_in)
        array = rng.standard_normal(array) * s
    return Tensor(np.asarray(array, dtype=_DTYPE), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(out_data, parents, backward) -> Tensor:
    if not _GRAD_ENABLED:
        return Tensor(out_data)
    return Tensor(out_data, parents=parents, backward=backward)


# ---------------------------------------------------------------------------
# Elementwise and linear algebra primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        a._accum(_unbroadcast(g / b.data, a.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data ** 2), b.shape))

    return _make(out, (a, b), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def backward(g):
        a._accum(g * exponent * a.data ** (exponent - 1))

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out ** 2))

    return _make(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        a._accum(g * (a.data > 0))

    return _make(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU with its closed-form derivative."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du))

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), backward)


def transpose(a, axis_a: int = -2, axis_b: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, axis_a, axis_b)

    def backward(g):
        a._accum(np.swapaxes(g, axis_a, axis_b))

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(out, (a,), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        a._accum(buf)

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    return getitem(table, (ids,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            p._accum(g[tuple(sl)])

    return _make(out, tuple(parts), backward)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where mask is True; no gradient flows through them."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)

    def backward(g):
        a._accum(np.where(mask, 0.0, g))

    return _make(out, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accum(out * (g - dot))

    return _make(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        p = np.exp(out)
        a._accum(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable gain and bias."""
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gain._accum((g * xhat).sum(axis=reduce_axes))
        bias._accum(g.sum(axis=reduce_axes))
        gx = g * gain.data
        x._accum(inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None,
                  reduction: str = "mean") -> Tensor:
    """Token-level negative log-likelihood over the last axis."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError(f"target id out of range [0, {V})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if ignore_id is not None:
        keep = targets != ignore_id
    else:
        keep = np.ones_like(targets, dtype=bool)
    count = max(int(keep.sum()), 1)
    total = -(picked * keep).sum()
    out = total / count if reduction == "mean" else total

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        scale = g / count if reduction == "mean" else g
        logits._accum((p - onehot) * keep[..., None] * scale)

    return _make(out, (logits,), backward)


def bce_with_logits(logits: Tensor, targets, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy from logits; targets are plain arrays in [0,1]."""
    logits = as_tensor(logits)
    z = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    elems = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    total = elems.sum()
    count = elems.size
    out = total / count if reduction == "mean" else total

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        scale = g / count if reduction == "mean" else g
        logits._accum((sig - z) * scale)

    return _make(out, (logits,), backward)


def kl_categorical(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(p_logits) || softmax(q_logits))."""
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"shape mismatch {p_logits.shape} vs {q_logits.shape}")
    p = softmax(p_logits)
    diff = sub(log_softmax(p_logits), log_softmax(q_logits))
    per_row = sum_(mul(p, diff), axis=-1)
    return mean(per_row)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Summed squared Euclidean distance between two equally shaped tensors."""
    d = sub(a, b)
    return sum_(mul(d, d))


# ---------------------------------------------------------------------------
# Gradient routing markers
# ---------------------------------------------------------------------------

def stop_gradient(a: Tensor) -> Tensor:
    """sg[*]: forward identity, no gradient to the argument."""
    return Tensor(a.data.copy())


def straight_through(continuous: Tensor, quantized: Tensor) -> Tensor:
    """Forward the quantized values, backpropagate as the identity onto the
    continuous input (the quantized side gets nothing)."""
    if continuous.shape != quantized.shape:
        raise ValueError("straight-through requires matching shapes")
    out = quantized.data.copy()

    def backward(g):
        continuous._accum(g)

    return _make(out, (continuous,), backward)


# ---------------------------------------------------------------------------
# Attention and sampling
# ---------------------------------------------------------------------------

def stabilized_attention(Q: Tensor, K: Tensor, V: Tensor, alpha: float = 1e3,
                         mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention in max-stabilized form.

    Computes softmax(alpha * (Q (K^T / (alpha sqrt(d))) - rowmax)) V, which
    equals the standard softmax(Q K^T / sqrt(d)) V up to floating-point
    error for any alpha > 0 (softmax shift/scale invariance), while keeping
    intermediate products small. `mask` is additive, applied before the
    row maximum; use large negative entries for causal masking.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    d = Q.shape[-1]
    scale = 1.0 / (alpha * math.sqrt(d))
    scores = matmul(Q, mul(transpose(K), scale))
    if mask is not None:
        scores = add(scores, np.asarray(mask) * (1.0 / alpha))
    rowmax = scores.data.max(axis=-1, keepdims=True)  # shift-invariant: safe to detach
    logits = mul(sub(scores, Tensor(rowmax)), alpha)
    return matmul(softmax(logits), V)


def sample_gumbel(shape, rng: np.random.Generator, eps: float = 1e-20) -> np.ndarray:
    u = rng.uniform(size=shape)
    return -np.log(-np.log(u + eps) + eps)


def gumbel_softmax(logits: Tensor, tau: float, rng: np.random.Generator,
                   noise: np.ndarray | None = None) -> Tensor:
    """Differentiable relaxed one-hot sample over the last axis.

    The returned rows are convex weights over the category basis; as tau
    approaches 0 (with the noise frozen) the mass collapses onto
    argmax(logits + noise). Pass `noise` to reuse a fixed Gumbel draw.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if noise is None:
        noise = sample_gumbel(logits.shape, rng)
    shifted = mul(add(logits, Tensor(noise)), 1.0 / tau)
    return softmax(shifted)


# ---------------------------------------------------------------------------
# Backward driver
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor reachable from a scalar loss."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class CosineSchedule:
    """Cosine annealing from lr_max down to lr_min over total_steps."""

    def __init__(self, lr_max: float = 1e-4, lr_min: float = 1e-5, total_steps: int = 10000):
        self.lr_max, self.lr_min, self.total_steps = lr_max, lr_min, total_steps

    def lr(self, step: int) -> float:
        t = min(step, self.total_steps) / max(self.total_steps, 1)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1 + math.cos(math.pi * t))


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 schedule: CosineSchedule | None = None):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.schedule = schedule
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}

    def current_lr(self) -> float:
        if self.schedule is not None:
            return self.schedule.lr(self.step_count)
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        lr = self.current_lr()
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=np.float64)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.step_count)
            vhat = self.v[k] / (1 - self.b2 ** self.step_count)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        out = {"step": np.array([self.step_count], dtype=np.int64)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"][0])
        for k in self.params:
            if f"m/{k}" in state:
                self.m[k] = np.asarray(state[f"m/{k}"], dtype=np.float64)
                self.v[k] = np.asarray(state[f"v/{k}"], dtype=np.float64)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"GSRCKPT\x00"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_IDS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def _pad8(fh) -> None:
    pos = fh.tell()
    if pos % 8:
        fh.write(b"\x00" * (8 - pos % 8))


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    vocab_hash: str, opt_state: dict | None = None,
                    meta: dict | None = None) -> None:
    """Binary container: little-endian, 8-byte-aligned array payloads.

    Layout: magic, u32 version, 64-byte vocabulary hash (hex ascii), u32
    metadata length + JSON blob, u32 entry count, then per entry a name,
    dtype code, shape, and the raw array. Writes are atomic (temp+rename).
    """
    import json as _json

    path = Path(path)
    entries: dict[str, np.ndarray] = {k: np.asarray(v) for k, v in params.items()}
    if opt_state:
        for k, v in opt_state.items():
            entries[f"opt/{k}"] = np.asarray(v)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        hash_bytes = vocab_hash.encode()
        if len(hash_bytes) != 64:
            raise ValueError("vocabulary hash must be 64 hex characters")
        fh.write(hash_bytes)
        blob = _json.dumps(meta or {}).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            if arr.dtype not in _DTYPE_IDS:
                arr = arr.astype(np.float64)
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_IDS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            _pad8(fh)
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
            _pad8(fh)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect_vocab_hash: str | None = None):
    """Returns (params, opt_state, vocab_hash, meta)."""
    import json as _json

    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        vocab_hash = fh.read(64).decode()
        if expect_vocab_hash is not None and vocab_hash != expect_vocab_hash:
            raise ValueError("checkpoint vocabulary hash does not match the loaded vocabulary")
        meta_len = struct.unpack("<I", fh.read(4))[0]
        meta = _json.loads(fh.read(meta_len).decode()) if meta_len else {}
        count = struct.unpack("<I", fh.read(4))[0]
        params: dict[str, np.ndarray] = {}
        opt_state: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", fh.read(2))[0]
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            pos = fh.tell()
            if pos % 8:
                fh.read(8 - pos % 8)
            dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
            arr = np.frombuffer(fh.read(nbytes), dtype=dtype).reshape(shape).astype(_DTYPE_CODES[code])
            pos = fh.tell()
            if pos % 8:
                fh.read(8 - pos % 8)
            if name.startswith("opt/"):
                opt_state[name[4:]] = arr
            else:
                params[name] = arr
    return params, opt_state, vocab_hash, meta
