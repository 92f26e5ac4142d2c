"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its backward rule on the active tape; calling
``backward`` on a scalar output replays the tape in reverse and accumulates
gradients into the ``.grad`` buffer of every tensor that requires them.
Tapes are kept on a thread-local stack, so independent tapes can run
concurrently without shared state.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "grad_check",
    "add", "sub", "mul", "matmul", "linear", "neg", "transpose", "reshape",
    "embedding", "take", "softmax", "sigmoid", "softplus", "log",
    "tanh", "gelu", "relu", "layer_norm", "attention",
    "sum_", "mean_",
]

_EPS_DEFAULT = 1e-9


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


_LOCAL = threading.local()


def _tape_stack():
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.entries = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append((out, tuple(inputs), backward_fn))
    return out


def backward(out: Tensor, tape: Tape):
    """Replay ``tape`` in reverse, accumulating grads from scalar ``out``."""
    if out.size != 1:
        raise ValueError(f"backward expects a scalar output, got shape {out.shape}")
    out.grad = np.ones_like(out.data)
    for node, inputs, backward_fn in reversed(tape.entries):
        upstream = node.grad
        if upstream is None:
            continue
        grads = backward_fn(upstream)
        for tensor, grad in zip(inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(up):
        return _unbroadcast(up, a.shape), _unbroadcast(up, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(up):
        return _unbroadcast(up, a.shape), _unbroadcast(-up, b.shape)

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda up: (-up,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(up):
        return _unbroadcast(up * b.data, a.shape), _unbroadcast(up * a.data, b.shape)

    return _record(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_vec, b_vec = a.ndim == 1, b.ndim == 1
    ad = a.data[None, :] if a_vec else a.data
    bd = b.data[:, None] if b_vec else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    # batched activations times a shared 2D matrix run as one flat GEMM
    flat = ad.ndim > 2 and bd.ndim == 2
    try:
        if flat:
            raw = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
        else:
            raw = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None
    out_data = raw
    if a_vec:
        out_data = out_data[..., 0, :]
    if b_vec:
        out_data = out_data[..., 0]
    out = Tensor(out_data)

    def bwd(up):
        u = up.reshape(raw.shape) if (a_vec or b_vec) else up
        if flat:
            u2 = u.reshape(-1, u.shape[-1])
            ga = (u2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ u2
        else:
            ga = _unbroadcast(np.matmul(u, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), u), bd.shape)
        if a_vec:
            ga = ga[0]
        if b_vec:
            gb = gb[:, 0]
        return ga, gb

    return _record(out, (a, b), bwd)


def linear(x, w, b) -> Tensor:
    """x @ w + b in one recorded node; x may carry leading batch dims."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"linear: shapes {x.shape}, {w.shape}, {b.shape} do not conform"
        )
    x2 = x.data.reshape(-1, x.shape[-1])
    raw = x2 @ w.data
    raw += b.data
    out = Tensor(raw.reshape(x.shape[:-1] + (w.shape[1],)))

    def bwd(up):
        u2 = up.reshape(-1, up.shape[-1])
        gx = (u2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ u2 if w.requires_grad else None
        gb = u2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


def transpose(a, axis1: int = -2, axis2: int = -1) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, axis1, axis2))
    return _record(out, (a,), lambda up: (np.swapaxes(up, axis1, axis2),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda up: (up.reshape(a.shape),))


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any leading shape)."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range for table with {table.shape[0]} rows"
        )
    out = Tensor(table.data[idx])

    def bwd(up):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, up)
        return (grad,)

    return _record(out, (table,), bwd)


def take(a, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis``, removing that axis."""
    a = _as_tensor(a)
    out = Tensor(np.take(a.data, index, axis=axis))

    def bwd(up):
        grad = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        grad[tuple(sl)] = up
        return (grad,)

    return _record(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(up):
        dot = (up * s).sum(axis=axis, keepdims=True)
        return ((up - dot) * s,)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    return _record(out, (a,), lambda up: (up * y * (1.0 - y),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(y)

    def bwd(up):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (up * sig,)

    return _record(out, (a,), bwd)


def log(a, eps: float | None = None) -> Tensor:
    """Natural log; pass ``eps`` to clamp the argument away from zero.

    Without ``eps`` a non-positive input is rejected, naming the offending
    element.
    """
    a = _as_tensor(a)
    x = a.data
    if eps is None:
        bad = np.flatnonzero(x <= 0)
        if bad.size:
            raise ValueError(
                f"log: non-positive input at flat index {int(bad[0])} "
                f"(value {x.flat[bad[0]]:.6g}); use the eps-clamped variant"
            )
        clamped = x
    else:
        clamped = np.maximum(x, eps)
    out = Tensor(np.log(clamped))

    def bwd(up):
        grad = up / clamped
        if eps is not None:
            grad = np.where(x >= eps, grad, 0.0)
        return (grad,)

    return _record(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda up: (up * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU with the tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(up):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (up * grad,)

    return _record(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda up: (up * (a.data > 0),))


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization over the last axis."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.einsum("...d,...d->...", xc, xc)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gain.data * xhat + bias.data)

    def bwd(up):
        lead = tuple(range(up.ndim - 1))
        ab = "abcde"[: up.ndim - 1]
        dg = _unbroadcast(np.einsum(f"{ab}d,{ab}d->d", up, xhat), gain.shape)
        db = _unbroadcast(up.sum(axis=lead) if lead else up, bias.shape)
        dxhat = up * gain.data
        m1 = dxhat.sum(axis=-1, keepdims=True)
        m2 = np.einsum("...d,...d->...", dxhat, xhat)[..., None]
        dx = inv * (dxhat - (m1 + xhat * m2) / d)
        return dx, dg, db

    return _record(out, (a, gain, bias), bwd)


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention, recorded as one fused node.

    Expects [..., length, head_dim] operands; keys and values share length.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(
            f"attention: shapes {q.shape}, {k.shape}, {v.shape} do not conform"
        )
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    s = scores
    out = Tensor(np.matmul(s, v.data))

    def bwd(up):
        gv = np.matmul(np.swapaxes(s, -1, -2), up)
        ds = np.matmul(up, np.swapaxes(v.data, -1, -2))
        dscores = (ds - (ds * s).sum(axis=-1, keepdims=True)) * s
        dscores *= scale
        gq = np.matmul(dscores, k.data)
        gk = np.matmul(np.swapaxes(dscores, -1, -2), q.data)
        return gq, gk, gv

    return _record(out, (q, k, v), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(up):
        g = up
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def bwd(up):
        g = up
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# numeric verification


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar Tensor and be evaluable at ``x +- step``
    perturbations. Relative error is |analytic - numeric| / (|numeric| + 1e-8),
    maximised over elements.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise ValueError("grad_check needs a scalar-valued map")
        backward(y, tape)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.data.shape)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat_base = base.ravel()
    flat_num = numeric.ravel()
    for i in range(flat_base.size):
        orig = flat_base[i]
        x.data.flat[i] = orig + step
        hi = float(f(x).data)
        x.data.flat[i] = orig - step
        lo = float(f(x).data)
        x.data.flat[i] = orig
        flat_num[i] = (hi - lo) / (2.0 * step)

    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    if not np.all(np.isfinite(err)):
        idx = int(np.flatnonzero(~np.isfinite(err))[0])
        raise FloatingPointError(f"grad_check: non-finite error at flat index {idx}")
    return float(err.max()) if err.size else 0.0
