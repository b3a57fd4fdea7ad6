"""Small dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays.  Every operation on a tensor that requires
gradients records its parents and a local backward rule; :func:`backward`
walks the recorded graph in reverse topological order and accumulates
gradients into the leaves.  The tape is rebuilt on every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AdamState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "concat",
    "make_rng",
    "maximum",
    "minimum",
    "spawn_seeds",
    "stack",
    "tensor",
    "zero_grad",
]

DTYPE = np.float64

# Derivative floor for fractional powers: d/dx x**a with a < 1 is unbounded at 0.
_POW_GRAD_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op = op
        self.shapes = (a, b)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor operators

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # --- operator sugar -----------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    @property
    def T(self):
        return transpose(self)

    def take(self, indices):
        return take(self, indices)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise binary -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    """Elementwise quotient.  Callers guarantee a nonzero denominator."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), bw, "div")


# --- elementwise unary --------------------------------------------------


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a scalar exponent.

    For exponents below one the derivative uses ``max(a, 1e-12)`` so that
    roots of exact zeros (a fully satisfied aggregate) yield finite gradients.
    """
    a = _wrap(a)
    e = float(exponent)
    out = a.data**e

    def bw(g):
        base = np.maximum(a.data, _POW_GRAD_FLOOR) if e < 1.0 else a.data
        return (g * e * base ** (e - 1.0),)

    return _node(out, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log.  Inputs must be strictly positive; truth values are clamped upstream."""
    a = _wrap(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("minimum", a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("maximum", a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def clamp(a, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValueError(f"clamp requires lo < hi, got lo={lo}, hi={hi}")
    a = _wrap(a)
    active = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * active,), "clamp")


# --- reductions ---------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def bw(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / n,)

    return _node(out, (a,), bw, "mean")


# --- linear algebra and shape ------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def getitem(a, index) -> Tensor:
    """Basic slicing or boolean masks (no repeated indices; use :func:`take` for those)."""
    a = _wrap(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[index] += g
        return (full,)

    return _node(a.data[index], (a,), bw, "slice")


def take(a, indices) -> Tensor:
    """Row lookup ``a[indices]`` along axis 0 (embedding tables)."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ValueError("concat of empty sequence")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ValueError("stack of empty sequence")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError("stack", ts[0].shape, t.shape)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw, "stack")


# --- backward pass ------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every leaf that requires them
    (call :func:`zero_grad` between steps).  Returns a map from each reached
    leaf to the gradient contributed by this call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=DTYPE)
            node.grad = g.copy() if node.grad is None else node.grad + g
            contributed[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return contributed


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- optimizer ----------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update; parameters get fresh data arrays."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# --- randomness ---------------------------------------------------------


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Independent child streams of one 64-bit root seed."""
    return np.random.SeedSequence(seed).spawn(n)
