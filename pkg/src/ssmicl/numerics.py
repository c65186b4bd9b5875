"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive executed while a :class:`Tape` is active is appended to the
tape together with its FLOP cost, so the same tape serves both for
``backward`` and as the instrumented FLOP counter.

FLOP convention: one real add, subtract, multiply or divide counts 1; an
elementwise special function (exp, log, softplus, sigmoid, tanh, sqrt, gelu)
counts 1 per element; sign flips, reshapes, indexing and concatenation are
free.  A complex multiply expressed in real arithmetic therefore costs 6.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class UsageError(RuntimeError):
    """The tape was used out of order."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An immutable float64 array that can take part in a recorded computation."""

    __array_priority__ = 100.0

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf.  ``data`` is replaced by the optimizer; ``grad`` accumulates."""

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self._data)

    @property
    def value(self) -> np.ndarray:
        return self._data

    def assign(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise ShapeError(f"{self.name}: cannot assign {arr.shape} to {self._data.shape}")
        arr.setflags(write=False)
        self._data = arr

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self._data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable | None
    flops: int


@dataclass
class Tape:
    """Ordered list of the primitives executed inside ``with Tape():``."""

    records: list[Record] = field(default_factory=list)
    flops: int = 0

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def counts_by_op(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for rec in self.records:
            out[rec.op] = out.get(rec.op, 0) + rec.flops
        return out

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate d(seed . output)/d(param) into every reachable Parameter."""
        if not self.records or not any(rec.output is output for rec in self.records):
            raise UsageError("backward called before a forward pass recorded this output")
        if seed is None:
            seed = np.ones(output.shape)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): seed}
        params: dict[int, Parameter] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None or rec.backward is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(t, Parameter):
                    params[key] = t
        for key, p in params.items():
            g = grads.get(key)
            if g is not None:
                p.grad = p.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(op: str, out: np.ndarray, inputs: Sequence, backward: Callable | None,
              flops: int) -> Tensor:
    """Wrap ``out`` as a Tensor and append it to the active tape, if any.

    Modules define their own primitives through this function; ``backward``
    maps the output gradient to a tuple of input gradients (None for inputs
    that receive no gradient).
    """
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by '{op}'")
    t = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    out.setflags(write=False)
    t._data = out
    tape = _active_tape()
    if tape is not None:
        tape.records.append(Record(op, tuple(inputs), t, backward, int(flops)))
        tape.flops += int(flops)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _check_broadcast("add", a, b)
    out = a.data + b.data
    return record_op("add", out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                     int(np.prod(shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _check_broadcast("sub", a, b)
    out = a.data - b.data
    return record_op("sub", out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
                     int(np.prod(shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _check_broadcast("mul", a, b)
    out = a.data * b.data
    return record_op("mul", out, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                     int(np.prod(shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return record_op("div", out, (a, b), backward, int(np.prod(shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op("neg", -a.data, (a,), lambda g: (-g,), 0)


def _unary(op, a, fn, dfn):
    a = as_tensor(a)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fn(a.data)
    return record_op(op, out, (a,), lambda g: (g * dfn(a.data, out),), a.size)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _unary("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a, _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a) -> Tensor:
    return _unary("softplus", a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _dgelu(x, y):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    return _unary("gelu", a, _gelu, _dgelu)


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", out, (a,), backward, a.size - np.size(out))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return record_op("mean", out, (a,), backward, a.size)


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics; cost n*m*(2k-1) per product in the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc
    k = a.shape[-1]
    flops = int(np.size(out)) * (2 * k - 1)

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (ad * g[..., None]).reshape(-1, ad.shape[-1]).sum(axis=0)
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op("matmul", out, (a, b), backward, flops)


def solve_lower(lower, rhs) -> Tensor:
    """Solve ``lower @ x = rhs`` by forward substitution (n^2 FLOPs per column)."""
    lower, rhs = as_tensor(lower), as_tensor(rhs)
    n = lower.shape[0]
    if lower.shape != (n, n) or rhs.shape[0] != n:
        raise ShapeError(f"solve_lower: {lower.shape} with rhs {rhs.shape}")
    if np.any(np.diag(lower.data) == 0.0):
        raise NumericError("solve_lower: singular triangular system")
    x = solve_triangular(lower.data, rhs.data, lower=True)
    cols = 1 if rhs.ndim == 1 else int(np.prod(rhs.shape[1:]))

    def backward(g):
        lam = solve_triangular(lower.data, g, lower=True, trans="T")
        gl = -np.tril(np.outer(lam, x) if x.ndim == 1 else lam.reshape(n, -1) @ x.reshape(n, -1).T)
        return gl, lam

    return record_op("solve_lower", x, (lower, rhs), backward, n * n * cols)


# ---------------------------------------------------------- normalisation etc.

def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, True = keep) zeroes weights.

    Cost per row of width n: n subtractions, n exps, n-1 adds, n divisions.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)
    n = a.shape[-1]
    rows = a.size // n

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record_op("softmax", out, (a,), backward, rows * (4 * n - 1))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine).

    Cost per row of width n: 5n + 3.
    """
    a = as_tensor(a)
    x = a.data
    n = a.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return record_op("layer_norm", out, (a,), backward, (a.size // n) * (5 * n + 3))


# --------------------------------------------------------------- shape plumbing

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return record_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),), 0)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return record_op("swapaxes", np.swapaxes(a.data, i, j), (a,),
                     lambda g: (np.swapaxes(g, i, j),), 0)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return record_op("reshape", np.expand_dims(a.data, axis), (a,),
                     lambda g: (g.reshape(a.shape),), 0)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op("getitem", out, (a,), backward, 0)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record_op("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), 0)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return record_op("stack", out, ts, backward, 0)


# ------------------------------------------------------------------ checking

def finite_difference_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                            step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must build and return a scalar Tensor; it is called under a
    fresh tape for the analytic pass and without one for the perturbations.
    """
    if not params:
        return 0.0
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        base = p.data.copy()
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += step
            p.assign(plus.reshape(base.shape))
            fp = loss_fn().item()
            minus = flat.copy()
            minus[i] -= step
            p.assign(minus.reshape(base.shape))
            fm = loss_fn().item()
            cd = (fp - fm) / (2 * step)
            err = abs(analytic.reshape(-1)[i] - cd) / (abs(cd) + 1e-12)
            worst = max(worst, err)
        p.assign(base)
    return worst
