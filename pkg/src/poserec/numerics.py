"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape` (a thread-local
stack). Outside a tape every op is a plain forward computation, so frozen
models can be evaluated concurrently without touching shared state.

    with Tape() as tape:
        loss = model_loss(...)
    tape.backward(loss)      # accumulates into Parameter.grad
    adam_step(params, lr=1e-4)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DeterminismError, ShapeError

DEGENERATE_NORM = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-d float64 array that may participate in a recorded computation."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named learnable tensor with gradient and Adam moment buffers."""

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.adam_t = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records operations in execution order; ``backward`` replays them reversed."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def backward(self, loss: Tensor, seed=None) -> None:
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=np.float64)}
        if isinstance(loss, Parameter):
            loss.grad += grads[id(loss)]
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    """max(0, x); at exactly 0 the gradient is 1/2, the symmetric subgradient."""
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, np.where(x.data == 0, 0.5, 0.0))
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * slope,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = np.exp(x.data - out)
    return _make(out, (x,), lambda g: (g * sig,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules; backward dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: left operand {a.shape} incompatible with right operand {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.

    Every index of an operand must also appear in the other operand or in the
    output, so each gradient is itself a two-operand einsum.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_idx = subscripts.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        if len(set(own)) != len(own) or not set(own) <= set(other) | set(out_idx):
            raise ShapeError(f"einsum: unsupported subscripts {subscripts!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: operands {a.shape} and {b.shape}: {exc}") from None

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------- reductions and shape


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _extreme(x: Tensor, axis, pick) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("max/min of an empty tensor")
    if axis is None:
        flat = int(pick(x.data.reshape(-1)))

        def backward(g):
            gx = np.zeros(x.data.size)
            gx[flat] = g
            return (gx.reshape(x.shape),)

        return _make(x.data.reshape(-1)[flat], (x,), backward)
    idx = np.expand_dims(pick(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward)


def tmax(x: Tensor, axis=None) -> Tensor:
    """Max reduction; the gradient flows to the first maximal entry."""
    return _extreme(x, axis, np.argmax)


def tmin(x: Tensor, axis=None) -> Tensor:
    return _extreme(x, axis, np.argmin)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- model-level primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax of an empty tensor")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def cosine_sim(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis`` with broadcasting over the other axes.

    Raises DegenerateVectorError if any participating vector has norm below
    1e-12 rather than returning a silent zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError(f"cosine_sim: vector lengths differ, {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=axis, keepdims=True)
    nb = np.linalg.norm(b.data, axis=axis, keepdims=True)
    if na.size and na.min() < DEGENERATE_NORM or nb.size and nb.min() < DEGENERATE_NORM:
        raise DegenerateVectorError("cosine similarity of a (near) zero-norm vector")
    ua, ub = a.data / na, b.data / nb
    cos = (ua * ub).sum(axis=axis, keepdims=True)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = g * (ub - cos * ua) / na
        gb = g * (ua - cos * ub) / nb
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.squeeze(cos, axis=axis), (a, b), backward)


def temporal_conv(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Per-node convolution along time with symmetric zero padding.

    ``x`` is (batch, time, nodes, channels). ``w`` is either (C, k) for a
    channel-wise kernel or (C_out, C_in, k) for a channel-mixing one. The
    kernel length must be odd; output length is ceil(T / stride).
    """
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[-1]
    if k % 2 != 1 or stride < 1:
        raise ShapeError(f"temporal_conv: kernel {k} must be odd and stride {stride} positive")
    depthwise = w.ndim == 2
    c_in = w.shape[0] if depthwise else w.shape[1]
    if x.ndim != 4 or x.shape[3] != c_in:
        raise ShapeError(f"temporal_conv: input {x.shape} does not match kernel {w.shape}")
    pad = k // 2
    t_in = x.shape[1]
    t_out = -(-t_in // stride)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    span = [slice(j, j + stride * (t_out - 1) + 1, stride) for j in range(k)]
    taps = [xp[:, sl] for sl in span]
    if depthwise:
        out = taps[0] * w.data[:, 0]
        for j in range(1, k):
            out += taps[j] * w.data[:, j]
    else:
        out = taps[0] @ w.data[:, :, 0].T
        for j in range(1, k):
            out += taps[j] @ w.data[:, :, j].T

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        g2 = g.reshape(-1, g.shape[-1])
        for j, sl in enumerate(span):
            tap2 = taps[j].reshape(-1, taps[j].shape[-1])
            if depthwise:
                gxp[:, sl] += g * w.data[:, j]
                gw[:, j] = np.einsum("nc,nc->c", g2, tap2)
            else:
                gxp[:, sl] += g @ w.data[:, :, j]
                gw[:, :, j] = g2.T @ tap2
        return gxp[:, pad : pad + t_in], gw

    return _make(out, (x, w), backward)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply a (C_in, C_out) map to the last axis of ``x`` as one 2-D product."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ w.data).reshape(lead + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2

    return _make(out, (x, w), backward)


# ---------------------------------------------------------------- optimisation


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    l2: float = 0.0,
) -> None:
    """One bias-corrected Adam update per parameter, then zero the grads.

    L2 regularisation enters as an extra gradient term ``l2 * value``. Each
    parameter keeps its own step count, so the update does not depend on the
    order parameters are passed in.
    """
    b1, b2 = betas
    for p in params:
        g = p.grad + l2 * p.data if l2 else p.grad
        p.adam_t += 1
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * g * g
        m_hat = p.adam_m / (1.0 - b1**p.adam_t)
        v_hat = p.adam_v / (1.0 - b2**p.adam_t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradcheckReport:
    per_param: dict = field(default_factory=dict)
    tolerance: float = 1e-6
    loss: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def failing(self) -> list:
        return [name for name, err in self.per_param.items() if not err < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failing


def gradcheck(
    forward: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-6,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare tape gradients with central finite differences.

    ``forward`` must rebuild the scalar loss from the current parameter values
    on every call. Per entry the error is |analytic - numeric| divided by
    max(|analytic|, |numeric|, floor * max(1, |loss|)); the floor keeps
    round-off on near-zero gradients from dominating. With ``max_entries`` only
    a random subset of each parameter's entries is perturbed.
    """
    with Tape() as tape:
        loss = forward()
    first = loss.data.copy()
    if not np.array_equal(forward().data, first):
        raise DeterminismError("forward closure returned different losses for identical inputs")
    for p in params:
        p.zero_grad()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    rng = rng or np.random.default_rng(0)
    scale = floor * max(1.0, abs(float(first)))
    report = GradcheckReport(tolerance=tolerance, loss=float(first))
    for p in params:
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for j in entries:
            orig = flat[j]
            flat[j] = orig + h
            up = float(forward().data)
            flat[j] = orig - h
            down = float(forward().data)
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[p.name].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), scale)
            worst = max(worst, err)
        report.per_param[p.name] = worst
    return report
