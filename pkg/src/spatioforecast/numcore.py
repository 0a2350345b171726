"""Dense float64 tensors with taped reverse-mode differentiation.

Deliberately small: only the operations the forecasting models need, each
with a hand-written vector-Jacobian product. A central finite-difference
oracle lives at the bottom so every gradient path can be audited against
an independent computation.

Tensors are immutable after creation except for the ``grad`` buffer. Ops
record onto the innermost active :class:`Tape`; with no tape active they
run as plain numpy (inference mode). Tapes are tracked per thread, so
independent tapes may run concurrently.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError", "Tensor", "Tape", "tensor", "constant", "backward",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose", "reshape",
    "concat_last", "relu", "softmax_rows", "layer_norm", "linear",
    "sum_all", "mean_all", "sum_axis", "mean_axis", "abs_", "square",
    "threshold_keep", "deg_inv_sqrt",
    "finite_difference", "max_relative_error",
]


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """A tensor that never receives gradients (e.g. adjacency inputs)."""
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


class Tape:
    """Ordered record of differentiable ops, usable as a context manager.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction and the backward sweep visits each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Wrap an op result, recording a node when grads are wanted."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, part in zip(node.inputs, node.vjp(g)):
            if part is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                acc = grads.get(id(inp))
                grads[id(inp)] = part if acc is None else acc + part
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad = inp.grad + part


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise / affine ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def threshold_keep(a: Tensor, tau: float) -> Tensor:
    """Zero entries below ``tau``, keep the rest verbatim (gradient passes
    only through kept entries)."""
    mask = a.data >= tau
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def deg_inv_sqrt(a: Tensor) -> Tensor:
    """Elementwise a^(-1/2) with zeros mapped to zero (isolated-node rule)."""
    pos = a.data > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(pos, a.data ** -0.5, 0.0)
        d = np.where(pos, -0.5 * a.data ** -1.5, 0.0)
    return _make(out, (a,), lambda g: (g * d,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last: shapes {a.shape} and {b.shape} differ off the last axis")
    na = a.shape[-1]

    def vjp(g):
        return g[..., :na], g[..., na:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents disagree for {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        da = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape)
        db = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape)
        return da, db

    return _make(ad @ bd, (a, b), vjp)


def linear(t: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: t @ w (+ b)."""
    out = matmul(t, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shp = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shp = a.shape
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shp).copy(),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shp = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shp).copy(),)

    return _make(out, (a,), vjp)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    return scale(sum_axis(a, axis, keepdims=keepdims), 1.0 / n)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    if not np.isfinite(a.data).all():
        raise ValueError("softmax_rows: non-finite input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return _make(s, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last (feature) axis to mean 0 / variance 1, then scale and shift."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scale/shift shapes {gamma.shape}/{beta.shape} vs features ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[], float], params: Sequence[Tensor],
                      step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of the scalar ``f()`` w.r.t. each tensor.

    ``f`` must recompute the loss from the current contents of ``params``;
    entries are perturbed in place and restored. Independent of the tape.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f())
            flat[i] = orig - step
            lo = float(f())
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps near-zero
    gradients from amplifying finite-difference noise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
