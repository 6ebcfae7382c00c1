"""Dense tensors with reverse-mode automatic differentiation.

Kernels are numpy; the tape is a DAG of TapeNode records whose backward
rules live in the name-indexed BACKWARD table so a rule can be inspected
(or fault-injected in tests) without touching the forward code.

Precision is a process-global switch: float32 for training, float64 for
finite-difference gradient checking.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e9  # additive -inf surrogate for masked attention logits

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class InvalidMaskError(ValueError):
    """A softmax row has no unmasked position."""


def set_precision(bits: int) -> None:
    """Select the global float width for newly created tensors (32 or 64)."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextlib.contextmanager
def precision(bits: int):
    prev = 32 if _DTYPE is np.float32 else 64
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class TapeNode:
    __slots__ = ("op", "inputs", "saved")

    def __init__(self, op: str, inputs: tuple, saved: tuple):
        self.op = op
        self.inputs = inputs  # Tensors (non-tensor operands live in saved)
        self.saved = saved


class Tensor:
    """N-dimensional float array, optionally participating in the tape.

    Immutable after construction except for grad accumulation. `grad` is
    allocated at exact zero on first use and accumulated (+=) by backward;
    successive backward calls sum unless the caller zeroes in between.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # the accumulator starts at exact zero; the first add is a copy
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = self.grad.reshape(self.data.shape)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, op: str, inputs: tuple, saved: tuple = ()) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _GRAD_ENABLED and any(
        isinstance(t, Tensor) and (t.requires_grad or t.node is not None)
        for t in inputs
    )
    out.requires_grad = False
    out.node = TapeNode(op, inputs, saved) if track else None
    return out


# Name-indexed backward rules. Signature: rule(node, grad_out) -> iterable of
# gradient arrays (or None) aligned with node.inputs.
BACKWARD: dict[str, Callable] = {}


def _rule(name: str):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# broadcasting policy: shapes must match exactly, or the smaller operand's
# shape must be a trailing suffix of the larger's (new leading dims only).
# Scalars (shape () or (1,)) are the degenerate suffix case.


def _broadcast_check(sa: tuple, sb: tuple, op: str) -> None:
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small and small not in ((), (1,)):
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not align "
                         "(only leading-dim expansion is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # sum gradient over the leading dims the forward broadcast introduced
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    if g.shape != shape:  # scalar / (1,) operands
        g = g.sum().reshape(shape)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape, "add")
    return _result(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_bwd(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape, "mul")
    return _result(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_bwd(node, g):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. c)."""
    c = float(c)
    return _result(a.data * c, "scale", (a,), (c,))


@_rule("scale")
def _scale_bwd(node, g):
    (c,) = node.saved
    return (g * c,)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), (out,))


@_rule("exp")
def _exp_bwd(node, g):
    (out,) = node.saved
    return (g * out,)


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), "log", (a,))


@_rule("log")
def _log_bwd(node, g):
    (a,) = node.inputs
    return (g / a.data,)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for constant p >= 0 (0**0 == 1)."""
    p = float(p)
    return _result(a.data ** p, "power", (a,), (p,))


@_rule("power")
def _power_bwd(node, g):
    (a,) = node.inputs
    (p,) = node.saved
    if p == 0.0:
        return (np.zeros_like(a.data),)
    x = a.data
    if p < 1.0:
        # x == 0 would give an infinite local slope; clamp it to zero
        d = np.where(x == 0.0, 0.0, p * x ** (p - 1.0))
    else:
        d = p * x ** (p - 1.0)
    return (g * d,)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softplus_raw(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))),
                    np.log1p(np.exp(-np.abs(x))))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_raw(a.data)
    return _result(out, "sigmoid", (a,), (out,))


@_rule("sigmoid")
def _sigmoid_bwd(node, g):
    (out,) = node.saved
    return (g * out * (1.0 - out),)


def log_sigmoid(a: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)) == -softplus(-x)."""
    return _result(-_softplus_raw(-a.data), "log_sigmoid", (a,))


@_rule("log_sigmoid")
def _log_sigmoid_bwd(node, g):
    (a,) = node.inputs
    # d/dx log sigmoid(x) = sigmoid(-x)
    return (g * _sigmoid_raw(-a.data),)


def focal_binary_term(s: Tensor, gamma: float) -> Tensor:
    """Stable sigmoid focal term sigmoid(-s)**gamma * softplus(-s).

    Equals (1-p)**gamma * (-log p) with p = sigmoid(s); gamma == 0 reduces
    to plain binary cross-entropy against target 1. Fused so the gradient
    stays finite when p saturates to exactly 1 or 0 in floating point.
    """
    gamma = float(gamma)
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    q = _sigmoid_raw(-s.data)  # == 1 - p
    sp = _softplus_raw(-s.data)  # == -log p
    return _result(q ** gamma * sp, "focal_binary_term", (s,), (gamma, q, sp))


@_rule("focal_binary_term")
def _focal_binary_term_bwd(node, g):
    gamma, q, sp = node.saved
    # d/ds [q^g * sp] = -q^g * (g*(1-q)*sp + q); at q == 0 both factors vanish
    qg = q ** gamma
    d = -qg * (gamma * (1.0 - q) * sp + q)
    return (g * d,)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    u = x * x
    u *= x
    u *= 0.044715
    u += x
    u *= _GELU_C
    t = np.tanh(u)
    out = t + 1.0
    out *= x
    out *= 0.5
    return _result(out, "gelu", (a,), (t,))


@_rule("gelu")
def _gelu_bwd(node, g):
    (a,) = node.inputs
    (t,) = node.saved
    x = a.data
    du = x * x
    du *= 3 * 0.044715
    du += 1.0
    du *= _GELU_C
    # d = 0.5*(1+t) + 0.5*x*(1-t^2)*du
    du *= 1.0 - t * t
    du *= x
    du += 1.0 + t
    du *= 0.5
    du *= g
    return (du,)


# ---------------------------------------------------------------------------
# matmul / reductions / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for [..., m, k] x [k, n] or equal-batch [..., k, n]."""
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {sa} x {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul inner extents differ: {sa} x {sb}")
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul batch dims differ: {sa} x {sb}")
    if len(sb) == 2 and len(sa) > 2:
        # single flat GEMM beats numpy's stacked loop for the linear-layer case
        out = (a.data.reshape(-1, sa[-1]) @ b.data).reshape(sa[:-1] + (sb[-1],))
    else:
        out = a.data @ b.data
    return _result(out, "matmul", (a, b))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map x @ w + b over the last axis."""
    sx, sw = x.shape, w.shape
    if len(sw) != 2 or sx[-1] != sw[0]:
        raise ShapeError(f"linear: {sx} x {sw}")
    if b.shape != (sw[1],):
        raise ShapeError(f"linear bias {b.shape} vs ({sw[1]},)")
    out = x.data.reshape(-1, sx[-1]) @ w.data
    out += b.data
    return _result(out.reshape(sx[:-1] + (sw[1],)), "linear", (x, w, b))


@_rule("linear")
def _linear_bwd(node, g):
    x, w, b = node.inputs
    n = g.shape[-1]
    g2 = g.reshape(-1, n)
    dx = (g2 @ w.data.T).reshape(x.shape) if needs_grad(x) else None
    dw = x.data.reshape(-1, x.shape[-1]).T @ g2 if needs_grad(w) else None
    return dx, dw, g2.sum(axis=0) if needs_grad(b) else None


@_rule("matmul")
def _matmul_bwd(node, g):
    a, b = node.inputs
    # dA = dC . B^T ; dB = A^T . dC
    da = db = None
    if b.ndim == 2 and a.ndim > 2:
        k = a.shape[-1]
        n = g.shape[-1]
        g2 = g.reshape(-1, n)
        if needs_grad(a):
            da = (g2 @ b.data.T).reshape(a.shape)
        if needs_grad(b):
            db = a.data.reshape(-1, k).T @ g2
    else:
        if needs_grad(a):
            da = g @ b.data.swapaxes(-1, -2)
        if needs_grad(b):
            db = a.data.swapaxes(-1, -2) @ g
    return da, db


def sum_(a: Tensor, axis=None) -> Tensor:
    return _result(np.sum(a.data, axis=axis), "sum", (a,), (axis,))


@_rule("sum")
def _sum_bwd(node, g):
    (a,) = node.inputs
    (axis,) = node.saved
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    gx = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
    return (np.broadcast_to(gx, a.shape).copy(),)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else _axis_extent(a.shape, axis)
    return scale(sum_(a, axis=axis), 1.0 / n)


def _axis_extent(shape: tuple, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), "reshape", (a,), (a.shape,))


@_rule("reshape")
def _reshape_bwd(node, g):
    (orig,) = node.saved
    return (g.reshape(orig),)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _result(a.data.transpose(axes), "transpose", (a,), (axes,))


@_rule("transpose")
def _transpose_bwd(node, g):
    (axes,) = node.saved
    inv = np.argsort(axes)
    return (g.transpose(inv),)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = tuple(t.shape[axis] for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, "concat", tuple(tensors), (axis, sizes))


@_rule("concat")
def _concat_bwd(node, g):
    axis, sizes = node.saved
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis "
                         f"{axis} of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    return _result(a.data[tuple(idx)], "narrow", (a,), (axis, start, length))


@_rule("narrow")
def _narrow_bwd(node, g):
    (a,) = node.inputs
    axis, start, length = node.saved
    out = np.zeros_like(a.data)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    out[tuple(idx)] = g
    return (out,)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(f"embedding ids out of range for table {table.shape}")
    return _result(table.data[ids], "embedding", (table,), (ids,))


@_rule("embedding")
def _embedding_bwd(node, g):
    (table,) = node.inputs
    (ids,) = node.saved
    dt = np.zeros_like(table.data)
    np.add.at(dt, ids.ravel(), g.reshape(-1, table.shape[-1]))
    return (dt,)


def gather_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = a[..., ids[...]]; ids shaped like a without the last axis."""
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last ids {ids.shape} vs values {a.shape}")
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]
    return _result(out, "gather_last", (a,), (ids,))


@_rule("gather_last")
def _gather_last_bwd(node, g):
    (a,) = node.inputs
    (ids,) = node.saved
    da = np.zeros_like(a.data)
    np.put_along_axis(da, ids[..., None], g[..., None], axis=-1)
    return (da,)


# ---------------------------------------------------------------------------
# normalization / softmax


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} "
                         f"vs features ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    x2 = x.data.reshape(-1, d)
    mu = x2.mean(axis=-1, keepdims=True)
    xhat = x2 - mu
    var = np.einsum("rd,rd->r", xhat, xhat) / d
    inv = (1.0 / np.sqrt(var + eps))[:, None].astype(x2.dtype, copy=False)
    xhat *= inv
    out = xhat * gain.data
    out += bias.data
    return _result(out.reshape(x.shape), "layer_norm", (x, gain, bias),
                   (xhat, inv))


@_rule("layer_norm")
def _layer_norm_bwd(node, g):
    x, gain, bias = node.inputs
    xhat, inv = node.saved
    d = g.shape[-1]
    g2 = g.reshape(-1, d)
    dxhat = g2 * gain.data
    # dL/dx through the normalize: inv * (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (np.einsum("rd,rd->r", dxhat, xhat) / d)[:, None]
    dx = dxhat
    dx -= m1
    dx -= xhat * m2.astype(xhat.dtype, copy=False)
    dx *= inv
    dgain = np.einsum("rd,rd->d", g2, xhat) if needs_grad(gain) else None
    dbias = g2.sum(axis=0) if needs_grad(bias) else None
    return dx.reshape(x.shape), dgain, dbias


def masked_softmax(logits: Tensor, mask: np.ndarray | None) -> Tensor:
    """Softmax over the last axis; masked positions get probability exactly 0.

    mask is a boolean array broadcastable to logits' shape (None means all
    positions visible); every row must keep at least one unmasked position.
    Masked logits are pushed down by the additive -inf surrogate before the
    stabilizing max-subtraction.
    """
    if mask is None:
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        return _result(out, "masked_softmax", (logits,), (out,))
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("masked_softmax: fully masked row")
    z = logits.data + np.where(mask, logits.data.dtype.type(0), MASK_FILL)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e *= mask  # exact zeros at masked positions
    out = e / e.sum(axis=-1, keepdims=True)
    return _result(out, "masked_softmax", (logits,), (out,))


@_rule("masked_softmax")
def _masked_softmax_bwd(node, g):
    (out,) = node.saved
    # masked entries have out == 0, so they receive zero gradient
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    return _result(out, "log_softmax", (a,), (out,))


@_rule("log_softmax")
def _log_softmax_bwd(node, g):
    (out,) = node.saved
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit L2 norm along the last axis (exact for nonzero rows)."""
    n = np.sqrt(np.maximum((a.data * a.data).sum(axis=-1, keepdims=True), eps))
    out = a.data / n
    return _result(out, "l2_normalize", (a,), (out, n))


@_rule("l2_normalize")
def _l2_normalize_bwd(node, g):
    out, n = node.saved
    return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of a [B, T, d] tensor over axis 1, restricted to mask [B, T]."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"masked_mean mask {mask.shape} vs values {a.shape}")
    cnt = mask.sum(axis=1)
    if (cnt == 0).any():
        raise InvalidMaskError("masked_mean: row with no valid positions")
    w = (mask / cnt[:, None]).astype(a.data.dtype)
    out = np.einsum("btd,bt->bd", a.data, w)
    return _result(out, "masked_mean", (a,), (w,))


@_rule("masked_mean")
def _masked_mean_bwd(node, g):
    (w,) = node.saved
    return (g[:, None, :] * w[:, :, None],)


# ---------------------------------------------------------------------------
# fused multi-head attention cores: one tape node per attention call keeps
# the hot path off the generic slice/reshape machinery


def _mha_forward(q3, k3, v3, heads: int, mask):
    b, tq, d = q3.shape
    tk = k3.shape[1]
    dh = d // heads
    q = q3.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    k = k3.reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    v = v3.reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2)
    scores *= 1.0 / math.sqrt(dh)
    if mask is not None:
        m = np.broadcast_to(mask[:, None, :, :], scores.shape)
        if not m.any(axis=-1).all():
            raise InvalidMaskError("attention: fully masked query row")
        scores = scores + np.where(m, scores.dtype.type(0), MASK_FILL)
    scores -= scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    if mask is not None:
        att *= m
    att /= att.sum(axis=-1, keepdims=True)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
    return np.ascontiguousarray(ctx), att, q, k, v


def _mha_backward(g, att, q, k, v, heads: int):
    b, tq, d = g.shape
    dh = d // heads
    gh = g.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    dv = att.transpose(0, 1, 3, 2) @ gh
    datt = gh @ v.transpose(0, 1, 3, 2)
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    ds *= 1.0 / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    return dq, dk, dv


def attention_core(qkv: Tensor, heads: int, mask: np.ndarray | None) -> Tensor:
    """Fused self-attention from a packed [B, T, 3d] qkv projection.

    Splits heads, applies scaled dot-product attention with the optional
    boolean mask (additive -inf surrogate, masked weights exactly 0), and
    re-merges heads into [B, T, d].
    """
    b, t, d3 = qkv.shape
    d = d3 // 3
    if d3 != 3 * d or d % heads:
        raise ShapeError(f"attention_core: bad packed shape {qkv.shape} "
                         f"for {heads} heads")
    x = qkv.data
    ctx, att, q, k, v = _mha_forward(x[..., :d], x[..., d:2 * d],
                                     x[..., 2 * d:], heads, mask)
    return _result(ctx, "attention_core", (qkv,), (att, q, k, v, heads))


@_rule("attention_core")
def _attention_core_bwd(node, g):
    (qkv,) = node.inputs
    att, q, k, v, heads = node.saved
    dq, dk, dv = _mha_backward(g, att, q, k, v, heads)
    out = np.empty_like(qkv.data)
    b, h, tq, dh = dq.shape
    d = h * dh
    out[..., 0:d] = dq.transpose(0, 2, 1, 3).reshape(b, tq, d)
    out[..., d:2 * d] = dk.transpose(0, 2, 1, 3).reshape(b, tq, d)
    out[..., 2 * d:] = dv.transpose(0, 2, 1, 3).reshape(b, tq, d)
    return (out,)


def attention_core_cross(q_in: Tensor, kv: Tensor, heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Fused cross-attention: queries [B, Tq, d] against packed [B, Tk, 2d]
    key/value projections."""
    b, tq, d = q_in.shape
    if kv.shape[-1] != 2 * d or d % heads:
        raise ShapeError(f"attention_core_cross: {q_in.shape} vs {kv.shape}")
    ctx, att, q, k, v = _mha_forward(q_in.data, kv.data[..., :d],
                                     kv.data[..., d:], heads, mask)
    return _result(ctx, "attention_core_cross", (q_in, kv),
                   (att, q, k, v, heads))


@_rule("attention_core_cross")
def _attention_core_cross_bwd(node, g):
    q_in, kv = node.inputs
    att, q, k, v, heads = node.saved
    dq, dk, dv = _mha_backward(g, att, q, k, v, heads)
    b, h, tq, dh = dq.shape
    d = h * dh
    tk = dk.shape[2]
    dq_out = np.ascontiguousarray(dq.transpose(0, 2, 1, 3).reshape(b, tq, d))
    dkv = np.empty_like(kv.data)
    dkv[..., :d] = dk.transpose(0, 2, 1, 3).reshape(b, tk, d)
    dkv[..., d:] = dv.transpose(0, 2, 1, 3).reshape(b, tk, d)
    return dq_out, dkv


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, edge clamp)


def _resize_coeffs(n_in: int, n_out: int):
    # output center i maps to input coordinate (i + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize of [H, W, C] or batched [B, H, W, C]."""
    batched = x.ndim == 4
    h_ax, w_ax = (1, 2) if batched else (0, 1)
    y0, y1, fy = _resize_coeffs(x.shape[h_ax], out_h)
    x0, x1, fx = _resize_coeffs(x.shape[w_ax], out_w)
    fy = fy.astype(x.dtype)
    fx = fx.astype(x.dtype)
    if batched:
        rows = (x[:, y0] * (1 - fy)[None, :, None, None]
                + x[:, y1] * fy[None, :, None, None])
        out = (rows[:, :, x0] * (1 - fx)[None, None, :, None]
               + rows[:, :, x1] * fx[None, None, :, None])
    else:
        rows = x[y0] * (1 - fy)[:, None, None] + x[y1] * fy[:, None, None]
        out = (rows[:, x0] * (1 - fx)[None, :, None]
               + rows[:, x1] * fx[None, :, None])
    return np.ascontiguousarray(out)


def resize_bilinear(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of an [H, W, C] tensor."""
    if a.ndim != 3:
        raise ShapeError(f"resize_bilinear expects [H, W, C], got {a.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear target {out_h}x{out_w} is empty")
    y0, y1, fy = _resize_coeffs(a.shape[0], out_h)
    x0, x1, fx = _resize_coeffs(a.shape[1], out_w)
    fy = fy.astype(a.data.dtype)
    fx = fx.astype(a.data.dtype)
    rows = a.data[y0] * (1.0 - fy)[:, None, None] + a.data[y1] * fy[:, None, None]
    out = (rows[:, x0] * (1.0 - fx)[None, :, None]
           + rows[:, x1] * fx[None, :, None])
    return _result(np.ascontiguousarray(out), "resize_bilinear", (a,),
                   ((y0, y1, fy), (x0, x1, fx)))


@_rule("resize_bilinear")
def _resize_bilinear_bwd(node, g):
    (a,) = node.inputs
    (y0, y1, fy), (x0, x1, fx) = node.saved
    # transpose of the column resample: scatter over W
    drows = np.zeros((g.shape[0], a.shape[1], a.shape[2]), dtype=g.dtype)
    gw = np.ascontiguousarray(g.swapaxes(0, 1))
    dw = drows.swapaxes(0, 1)  # view [W_in, out_h, C]
    np.add.at(dw, x0, gw * (1.0 - fx)[:, None, None])
    np.add.at(dw, x1, gw * fx[:, None, None])
    # transpose of the row resample: scatter over H
    da = np.zeros_like(a.data)
    np.add.at(da, y0, drows * (1.0 - fy)[:, None, None])
    np.add.at(da, y1, drows * fy[:, None, None])
    return (da,)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if isinstance(inp, Tensor) and inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order  # children before parents; reverse for backprop


def needs_grad(t) -> bool:
    """True when a backward rule must produce a gradient for this operand."""
    return isinstance(t, Tensor) and (t.requires_grad or t.node is not None)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf's grad."""
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if root.node is None:
        if root.requires_grad:
            root.accumulate_grad(grads[id(root)])
        return
    # rules may hand back views or shared buffers (e.g. add gives both inputs
    # the same array), so an entry is only mutated in place once this pass
    # owns it via the copy made on the second contribution
    owned: set[int] = set()
    for t in reversed(_toposort(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        owned.discard(id(t))
        if t.requires_grad:
            t.accumulate_grad(g)
        rule = BACKWARD[t.node.op]
        for inp, gi in zip(t.node.inputs, rule(t.node, g)):
            if gi is None or not isinstance(inp, Tensor):
                continue
            if inp.node is None:
                if inp.requires_grad:
                    inp.accumulate_grad(gi)
                continue
            key = id(inp)
            acc = grads.get(key)
            if acc is None:
                grads[key] = gi
            elif key in owned:
                acc += gi
            else:
                grads[key] = acc + gi
                owned.add(key)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    The denominator is max(|analytic|, |central|, 1e-8) per coordinate; the
    step is h scaled by max(1, |x_i|).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = (probe.grad if probe.grad is not None
                else np.zeros_like(probe.data)).copy()

    flat = x.data.reshape(-1).copy()
    cd = np.zeros_like(flat)
    for i in range(flat.size):
        hi = h * max(1.0, abs(float(flat[i])))
        for sign, slot in ((+1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[i] += sign * hi
            val = f(Tensor(bumped.reshape(x.shape))).item()
            cd[i] += val if slot == 0 else -val
        cd[i] /= 2.0 * hi
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(cd)), 1e-8)
    return float(np.max(np.abs(a - cd) / denom))


def parameters_vector(params: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in params])
