"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op builds its output eagerly and, when gradients are enabled and some
input requires them, attaches a tape entry holding the inputs and a local
gradient rule. ``backward`` orders the entries reachable from a scalar loss
topologically, runs the rules in reverse and then clears them.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DeterminismError, EmptyInputError, ShapeError, StaleTapeError

__all__ = [
    "AdamState",
    "ContractError",
    "DeterminismError",
    "EmptyInputError",
    "GradCheckReport",
    "ShapeError",
    "StaleTapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "avg_pool_rows",
    "backward",
    "finite_diff_check",
    "matmul",
    "max_pool_rows",
    "no_grad",
    "softmax",
]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Entry:
    __slots__ = ("inputs", "rule", "op")

    def __init__(self, inputs, rule, op):
        self.inputs = inputs
        self.rule = rule
        self.op = op


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Dense float64 array with an optional gradient record."""

    __array_priority__ = 100
    __slots__ = ("_data", "requires_grad", "grad", "name", "_entry", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self._data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._entry: _Entry | None = None
        self._consumed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.owndata and arr.base is not None and arr.base.flags.writeable:
            arr = arr.copy()
        t._data = _frozen(arr)
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._entry = None
        t._consumed = False
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise ShapeError(f"cannot assign data of shape {arr.shape} to tensor of shape {self._data.shape}")
        self._data = _frozen(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self._data, precision=4)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], rule, op: str) -> Tensor:
    t = Tensor._wrap(out)
    if grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._entry = _Entry(inputs, rule, op)
    return t


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


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), rule, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(exponent)
    return _record(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, which keeps gradient checks clean."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), rule, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def max_pool_rows(v) -> Tensor:
    """Column-wise maximum over the row axis (second to last).

    ``(..., j, d) -> (..., d)``. The subgradient goes to the first maximal row.
    """
    v = as_tensor(v)
    if v.ndim < 2:
        raise ShapeError(f"max_pool_rows expects at least 2 dims, got shape {v.shape}")
    if v.shape[-2] == 0:
        raise EmptyInputError("max_pool_rows on an input with zero rows")
    idx = np.argmax(v.data, axis=-2)[..., None, :]
    out = np.take_along_axis(v.data, idx, axis=-2)[..., 0, :]
    shape = v.shape

    def rule(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g[..., None, :], axis=-2)
        return (full,)

    return _record(out, (v,), rule, "max_pool_rows")


def avg_pool_rows(v) -> Tensor:
    """Column-wise mean over the row axis: ``(..., j, d) -> (..., d)``."""
    v = as_tensor(v)
    if v.ndim < 2:
        raise ShapeError(f"avg_pool_rows expects at least 2 dims, got shape {v.shape}")
    if v.shape[-2] == 0:
        raise EmptyInputError("avg_pool_rows on an input with zero rows")
    return mean(v, axis=-2)


# -------------------------------------------------------------------- shaping


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(a.data[index]), (a,), rule, "getitem")


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; the table gradient is a scatter-add."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    shape = table.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _record(table.data[idx], (table,), rule, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, rule, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _record(np.stack([t.data for t in ts], axis=axis), ts, rule, "stack")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(np.matmul(ad, bd), (a, b), rule, "matmul")


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (v,), rule, "softmax")


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def rule(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (v,), rule, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def rule(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _record(xhat * gd + bias.data, (x, gain, bias), rule, "layer_norm")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return as_tensor(x)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor._wrap(mask))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(N, C)`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return -mean(picked)


# -------------------------------------------------------------------- backward


class Tape:
    """Recorded operations reachable from a loss, in topological order."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise StaleTapeError("graph already consumed by an earlier backward pass; rerun the forward")
            stack_.append((node, True))
            if node._entry is not None:
                for inp in node._entry.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack_.append((inp, False))
        return cls([t for t in order if t._entry is not None])

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        for t in self.entries:
            t._entry = None
            t._consumed = True
        self.entries = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if loss._consumed:
        raise StaleTapeError("backward called twice on the same graph; rerun the forward")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._entry is None:
        loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t._entry.rule(g)
        for inp, ig in zip(t._entry.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._entry is None:
                inp.grad = np.array(ig, dtype=np.float64) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
    tape.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros(p.shape) for p in params],
            v=[np.zeros(p.shape) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update; parameters get fresh data arrays."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state was built for a different parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ContractError(f"missing gradient for parameter {i} ({p.name or 'unnamed'})")
        if np.shape(g) != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter shape {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        state.m[i], state.v[i] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]


def _as_list(x) -> list[Tensor]:
    if isinstance(x, Tensor):
        return [x]
    if isinstance(x, dict):
        return list(x.values())
    return list(x)


def finite_diff_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f`` against central differences.

    ``x`` may be a single tensor (then ``f`` is called as ``f(x)``) or a list
    of tensors that ``f()`` closes over. The error is measured per tensor as
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`` and
    the report carries the worst one. The floor keeps tensors whose true
    gradient is zero (a key bias under softmax, say) from turning rounding
    noise into a large relative error.
    """
    single = isinstance(x, Tensor)
    xs = _as_list(x)

    def call() -> Tensor:
        return f(x) if single else f()

    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        loss = call()
        if loss.size != 1:
            raise ContractError(f"finite_diff_check needs a scalar function, got shape {loss.shape}")
        with no_grad():
            first = call().data.copy()
            second = call().data.copy()
        if not np.array_equal(first, second):
            raise DeterminismError("function returned different values on repeated evaluation")
        backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]

        numeric = []
        with no_grad():
            for t in xs:
                base = t.data.copy()
                num = np.zeros(t.shape)
                flat = num.reshape(-1)
                for k in range(base.size):
                    pert = base.copy().reshape(-1)
                    pert[k] += step
                    t.data = pert.reshape(base.shape)
                    up = call().item()
                    pert[k] -= 2 * step
                    t.data = pert.reshape(base.shape)
                    down = call().item()
                    flat[k] = (up - down) / (2 * step)
                t.data = base
                numeric.append(num)
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g

    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return GradCheckReport(worst, worst <= tol, analytic, numeric)
