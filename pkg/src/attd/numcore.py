"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output tensor.
``backward`` walks the recorded graph in reverse topological order and
accumulates gradients into the leaves that require them.

Only the broadcasting the model needs is supported: elementwise ops broadcast
with numpy rules and gradients are summed back to the input shapes.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class StateError(RuntimeError):
    """Gradient state is not in the expected condition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_pending", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._pending = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient state ------------------------------------------------
    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)
        self._pending = False

    def set_requires_grad(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        self.grad = np.zeros_like(self.data) if flag else None
        self._pending = False

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / _as_array(other)) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data``; record the op only when a parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._pending = False
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _result(data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    return _result(data, (x,), lambda g: (g * (1.0 - data * data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    data = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result(data, (x,), bw)


# -- shape ops -------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return _result(data, (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    data = x.data[index]
    if isinstance(data, np.ndarray):
        data = data.copy()
    else:
        data = np.array(data)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(data, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(data, tensors, bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight matrix: fold leading axes into rows
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(*a.shape[:-1], n)

        def bw2(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result(data, (a, b), bw2)
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(data, (table,), bw)


# -- normalization and probabilities -------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where positions with ``mask == False`` get exactly zero weight."""
    mask = np.broadcast_to(mask, x.shape)
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = x.data - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(data, (x, gain, bias), bw)


def cross_entropy(y: Tensor, targets) -> Tensor:
    """Per-row ``-log(max(y[a], EPS))`` for distributions ``y`` of shape (..., C)."""
    targets = np.asarray(targets, dtype=np.int64)
    n_cls = y.shape[-1]
    if np.any(targets < 0) or np.any(targets >= n_cls):
        raise IndexError(f"target index out of range for {n_cls} classes: {targets.tolist()}")
    if targets.shape != y.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match {y.shape[:-1]}")
    picked = np.take_along_axis(y.data, targets[..., None], axis=-1)[..., 0]
    clamped = np.maximum(picked, EPS)
    data = -np.log(clamped)

    def bw(g):
        full = np.zeros_like(y.data)
        local = np.where(picked > EPS, -1.0 / clamped, 0.0) * g
        np.put_along_axis(full, targets[..., None], local[..., None], axis=-1)
        return (full,)

    return _result(data, (y,), bw)


def forward_kl(p: Tensor, q: Tensor, axis: int = -1) -> Tensor:
    """``sum p * log((p + EPS) / (q + EPS))`` along ``axis``; zero-mass terms of p contribute 0."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"forward_kl shape mismatch: {p.shape} vs {q.shape}")
    ratio = np.log((p.data + EPS) / (q.data + EPS))
    terms = np.where(p.data > 0, p.data * ratio, 0.0)
    data = np.asarray(terms.sum(axis=axis))

    def bw(g):
        g = np.expand_dims(g, axis)
        gp = g * (ratio + p.data / (p.data + EPS))
        gq = -g * p.data / (q.data + EPS)
        return gp, gq

    return _result(data, (p, q), bw)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- graph traversal ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    leaves = [t for t in order if not t._parents]
    stale = [t for t in leaves if t._pending]
    if stale:
        names = ", ".join(t.name or repr(t) for t in stale[:3])
        raise StateError(f"backward called again without zero_grad ({names})")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in leaves:
        t._pending = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- verification ------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tol: float = 1e-6,
    indices: Sequence[int] | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autodiff against central finite differences of ``f`` at ``x``.

    ``indices`` restricts the comparison to a subset of flat positions.
    """
    x0 = np.array(_as_array(x), dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        backward(out)
        auto = xt.grad.reshape(-1)
    else:
        auto = np.zeros(x0.size)
    flat = x0.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    numeric, analytic = [], []
    with no_grad():
        for i in idx:
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += step
            minus[i] -= step
            fp = f(Tensor(plus.reshape(x0.shape))).item()
            fm = f(Tensor(minus.reshape(x0.shape))).item()
            numeric.append((fp - fm) / (2 * step))
            analytic.append(auto[i])
    numeric, analytic = np.array(numeric), np.array(analytic)
    if numeric.size == 0:
        return GradCheckReport(0.0, 0.0, tol, 0)
    rel = relative_error(analytic, numeric, floor)
    return GradCheckReport(float(rel.max()), float(np.abs(analytic - numeric).max()), tol, int(numeric.size))
