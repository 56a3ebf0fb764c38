"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation records its parents and a vector-Jacobian closure on the
output tensor.  ``Tensor.backward`` orders the reachable graph by creation
index (a valid topological order, since inputs always exist before outputs)
and sweeps it once in reverse.

Shapes must match exactly for elementwise operations; the only implicit
broadcast is tensor-with-scalar.  Anything else goes through an explicit
``broadcast_to``.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ComputationTape", "ShapeError", "DomainError", "NonFiniteError",
    "tensor", "constant", "set_precision", "get_precision", "precision", "get_dtype",
    "set_checked", "checked", "is_checked", "no_grad",
    "add", "sub", "mul", "div", "neg", "abs", "minimum", "maximum", "max", "min",
    "sum", "mean", "concat", "stack", "getitem", "reshape", "transpose", "broadcast_to",
    "sigmoid", "tanh", "exp", "log", "softmax", "log_softmax", "conv1d", "embedding",
    "clamp", "matmul", "square",
    "gradient_check", "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an op (checked mode only)."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced by an op while checked mode is active."""


# ---------------------------------------------------------------------------
# global configuration

_PRECISIONS = {"high": np.float64, "standard": np.float32}
_config = {"precision": "high", "checked": False}
_local = threading.local()
_ids = itertools.count()


def set_precision(mode: str) -> None:
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _config["precision"] = mode


def get_precision() -> str:
    return _config["precision"]


def get_dtype():
    return _PRECISIONS[_config["precision"]]


@contextmanager
def precision(mode: str):
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


def set_checked(flag: bool) -> None:
    _config["checked"] = bool(flag)


def is_checked() -> bool:
    return _config["checked"]


@contextmanager
def checked(flag: bool = True):
    old = is_checked()
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(old)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in this thread (evaluation, symbolic baselines)."""
    old = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self._id = next(_ids)
        self.op = "leaf"

    # basic properties
    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self): return transpose(self)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1 or self.data.ndim != 0:
                raise ShapeError("backward (loss must be a scalar)", self.shape)
            grad = np.ones((), dtype=self.data.dtype)
        tape = ComputationTape.from_output(self)
        tape.run(self, np.asarray(grad, dtype=self.data.dtype))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x: Tensor) -> bool:
    return x.data.ndim == 0


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    dtype = get_dtype()
    out.data = data if data.dtype == dtype else data.astype(dtype)
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if _config["checked"] and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op}: non-finite output")
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


@dataclass
class ComputationTape:
    """Recorded primitive applications reachable from one output, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def is_topological(self) -> bool:
        pos = {t._id: i for i, t in enumerate(self.nodes)}
        return all(pos[p._id] < pos[t._id] for t in self.nodes for p in t._parents if p._id in pos)

    def run(self, out: Tensor, grad: np.ndarray) -> int:
        """Reverse sweep; returns the number of nodes visited (each exactly once)."""
        grads = {out._id: grad}
        visited = 0
        for t in reversed(self.nodes):
            g = grads.pop(t._id, None)
            if g is None:
                continue
            visited += 1
            if t._vjp is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for p, gp in zip(t._parents, t._vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(p._id)
                grads[p._id] = gp if prev is None else prev + gp
        return visited


# ---------------------------------------------------------------------------
# elementwise binary ops (exact shape match or scalar)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    if _config["checked"] and np.any(b.data == 0):
        raise DomainError("div: zero denominator")
    q = a.data / b.data
    return _make(q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a), _unbroadcast(-g * q / b.data, b)), "div")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("minimum", a, b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a), _unbroadcast(g * ~pick_a, b)), "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("maximum", a, b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a), _unbroadcast(g * ~pick_a, b)), "maximum")


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # 1 / (1 + e^-x) == (1 + tanh(x / 2)) / 2, which never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if _config["checked"] and np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside the closed interval."""
    a = _as_tensor(a)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return ((s * (g - (g * s).sum(axis=axis, keepdims=True))) / temperature,)

    return _make(s, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    # C order fixes the summation order per output element, so a row's sum
    # does not depend on the other rows held in the same array
    data = np.ascontiguousarray(a.data)
    return _make(np.asarray(data.sum(axis=axis, keepdims=keepdims)), (a,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / float(n))


def _extreme(a: Tensor, axis, keepdims, fn, argfn, op) -> Tensor:
    data = a.data
    if axis is None:
        flat = data.reshape(-1)
        idx = argfn(flat)
        val = np.asarray(flat[idx])

        def vjp(g):
            out = np.zeros(flat.shape, dtype=data.dtype)
            out[idx] = g
            return (out.reshape(data.shape),)

        return _make(val, (a,), vjp, op)
    ax = axis % data.ndim
    idx = np.expand_dims(argfn(data, axis=ax), ax)
    val = np.take_along_axis(data, idx, axis=ax)
    if not keepdims:
        val = np.squeeze(val, axis=ax)

    def vjp(g):
        out = np.zeros(data.shape, dtype=data.dtype)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(out, idx, gk, axis=ax)
        return (out,)

    return _make(val, (a,), vjp, op)


def max(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max reduction; the first maximizing entry receives the gradient."""
    return _extreme(_as_tensor(a), axis, keepdims, np.max, np.argmax, "max")


def min(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Min reduction; the first minimizing entry receives the gradient."""
    return _extreme(_as_tensor(a), axis, keepdims, np.min, np.argmin, "min")


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat", *(u.shape for u in ts))
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", *(t.shape for t in ts))
    ax = axis % (ts[0].ndim + 1)
    return _make(np.stack([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))), "stack")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        if _has_advanced(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(np.asarray(a.data[idx]), (a,), vjp, "slice")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make(data, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the gradient is summed back."""
    a = _as_tensor(a)
    old = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", old, shape) from None
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(old) if s == 1 and shape[i + lead] != 1)

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True).reshape(old) if axes else g,)

    return _make(np.ascontiguousarray(data), (a,), vjp, "broadcast_to")


def matmul(a, b) -> Tensor:
    """Matrix product with identical leading (batch) dims; 1-D second operand allowed."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = a.ndim >= 2 and b.ndim >= 1 and a.shape[-1] == b.shape[-2 if b.ndim >= 2 else 0]
    if ok and b.ndim >= 2:
        ok = b.ndim == 2 and a.ndim == 2 or a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        if b.ndim == 1:
            return np.multiply.outer(g, b.data), np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return g @ bt, at @ g

    return _make(out, (a, b), vjp, "matmul")


def conv1d(a, kernel: Sequence[float]) -> Tensor:
    """Zero-padded 3-tap convolution along the last axis.

    ``out[i] = sum_k kernel[k] * a[i - (k - 1)]``; so ``[0, 0, 1]`` shifts mass
    one slot toward higher indices and ``[1, 0, 0]`` one slot lower.  Mass
    shifted past either end is lost.
    """
    a = _as_tensor(a)
    k = np.asarray(kernel, dtype=a.data.dtype)
    if k.shape != (3,):
        raise ShapeError("conv1d (kernel must have 3 taps)", k.shape)
    n = a.shape[-1]
    pad = [(0, 0)] * (a.ndim - 1) + [(1, 1)]
    xp = np.pad(a.data, pad)
    # a[i - (k-1)] == xp[i - k + 2]
    out = k[0] * xp[..., 2:n + 2] + k[1] * xp[..., 1:n + 1] + k[2] * xp[..., 0:n]

    def vjp(g):
        gp = np.pad(g, pad)
        # d out[i] / d a[j] = kernel[k] where j = i - k + 1  ->  i = j + k - 1
        return (k[0] * gp[..., 0:n] + k[1] * gp[..., 1:n + 1] + k[2] * gp[..., 2:n + 2],)

    return _make(out, (a,), vjp, "conv1d")


def embedding(table, indices) -> Tensor:
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding (table must be 2-D)", table.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for table of {table.shape[0]} rows")

    def vjp(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), vjp, "embedding")


# ---------------------------------------------------------------------------
# finite-difference gradient checker


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    nonfinite: bool
    analytic: list
    numeric: list

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        flag = " (non-finite values encountered)" if self.nonfinite else ""
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.1e}){flag}"


def gradient_check(f: Callable, point, tolerance: float = 1e-4, h: float = 1e-6,
                   floor: float = 1e-6, coords: dict | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``point`` is a Tensor or a sequence of Tensors; ``f`` is called with no
    arguments and must read from them.  The relative error of each coordinate
    is ``|a - n| / max(|a|, |n|, floor)``.  ``coords`` optionally restricts the
    check to a subset of flat indices per tensor position.
    """
    params = [point] if isinstance(point, Tensor) else list(point)
    with precision("high"):
        for p in params:
            p.data = p.data.astype(np.float64)
            p.requires_grad = True
            p.grad = None
        out = f()
        nonfinite = not np.all(np.isfinite(out.data))
        out.backward()
        analytic, numeric = [], []
        worst = 0.0
        for k, p in enumerate(params):
            ga = np.zeros(p.shape) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
            flat = p.data.reshape(-1)
            idxs = range(flat.size) if coords is None or k not in coords else coords[k]
            gn = np.full(flat.size, np.nan)
            for i in idxs:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + h
                    fp = float(f().data)
                    flat[i] = orig - h
                    fm = float(f().data)
                flat[i] = orig
                gn[i] = (fp - fm) / (2.0 * h)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    nonfinite = True
                    continue
                a = ga.reshape(-1)[i]
                err = np.abs(a - gn[i]) / np.max([np.abs(a), np.abs(gn[i]), floor])
                worst = float(np.max([worst, err]))
            analytic.append(ga)
            numeric.append(gn.reshape(p.shape))
    return GradCheckReport(worst, tolerance, bool(worst < tolerance and not nonfinite), nonfinite,
                           analytic, numeric)
