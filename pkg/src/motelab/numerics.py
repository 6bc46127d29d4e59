"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when one is
open and at least one input requires a gradient, so inference runs without
any bookkeeping. Every primitive accepts numpy-broadcastable shapes and the
backward pass sums gradients back down to each input's shape.
"""

from __future__ import annotations

import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "EmptyAxisError",
    "DegenerateVectorError",
    "DeterminismError",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "div_scalar",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "gelu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "embedding",
    "pick",
    "cosine_similarity",
    "gradient_check",
]

# GELU tanh approximation constants.
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    pass


class EmptyAxisError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class Tensor:
    """An n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("motelab_tape", default=None)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on a scalar output. Gradients of leaf tensors with
    ``requires_grad`` are accumulated into their ``grad`` slot.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + ig
                else:
                    pending[key] = ig
                    leaves[key] = inp
        produced = {id(n.out) for n in self.nodes}
        for key, g in pending.items():
            t = leaves.get(key)
            if t is None or key in produced:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        self.nodes.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # Fold leading axes into one GEMM.
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit(out, (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def div_scalar(x, c: float) -> Tensor:
    x = _as_tensor(x)
    return _emit(x.data / c, (x,), lambda g: (g / c,))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return div_scalar(tsum(x, axis=axis, keepdims=keepdims), float(n))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def gelu(x) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * xd * (1.0 + GELU_A * x2))

    def backward(g):
        dt = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dt),)

    return _emit(0.5 * xd * (1.0 + t), (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased (divide-by-d) variance."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise EmptyAxisError("layer_norm over an empty axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + bias.data, (x, gain, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise EmptyAxisError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit(s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), backward)


def l2_normalize(x) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateVectorError("cannot normalize a zero vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit(y, (x,), backward)


def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    wshape = weight.shape

    def backward(g):
        gw = np.zeros(wshape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (gw,)

    return _emit(weight.data[ids], (weight,), backward)


def pick(x, index: np.ndarray) -> Tensor:
    """out[i] = x[i, index[i]] for a 2-d input."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[rows, index] = g
        return (gx,)

    return _emit(x.data[rows, index], (x,), backward)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64).ravel()
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(min(1.0, max(-1.0, np.dot(u, v) / (nu * nv))))


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
) -> float:
    """Largest |analytic - numeric| / max(1, |numeric|) over every scalar parameter.

    Numeric derivatives are central differences. ``loss_fn`` must rebuild the
    forward pass from the current parameter values on each call.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    params = list(params)
    first, second = loss_fn().item(), loss_fn().item()
    if first != second:
        raise DeterminismError(f"loss_fn is not deterministic: {first!r} != {second!r}")

    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
