"""Dense matrices with reverse-mode automatic differentiation.

A deliberately small engine: tensors wrap row-major numpy arrays
(float32 or float64), every op records its parents plus a
vector-Jacobian closure, and ``backward`` replays the recorded graph
in reverse topological order. Differentiable ops work on rank-2
arrays; storage itself may be any rank (images are rank 3 on disk).

Broadcasting is restricted on purpose: elementwise ops demand equal
shapes, and scalars enter through ``scale``/``add_const`` (or a bare
Python float on the operator sugar). Anything fancier raises
DimMismatch instead of silently broadcasting.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimMismatch,
    DisconnectedGraph,
    DomainError,
    MissingGrad,
    NonFinite,
    NotScalar,
)

Array = np.ndarray

_DTYPES = {"f32": np.float32, "f64": np.float64}
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus optional gradient and autodiff bookkeeping.

    Invariants: ``grad`` is allocated (zeros, same shape/dtype as
    ``data``) exactly when ``requires_grad`` is true, and is None
    otherwise.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, dtype=np.float64, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise DimMismatch(f"unsupported dtype {arr.dtype}; use f32 or f64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array, ...]] | None = None
        self._op: str = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: Array, parents: tuple["Tensor", ...], vjp, op: str) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        t.requires_grad = track
        t.grad = np.zeros_like(data) if track else None
        t._parents = parents if track else ()
        t._vjp = vjp if track else None
        t._op = op if track else "leaf"
        return t

    # -- introspection ---------------------------------------------------------

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        """Copy of the underlying values (detached)."""
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.dims}, dtype={self.data.dtype.name}{flag}, op={self._op})"

    # -- operator sugar (thin wrappers over the module-level ops) --------------

    def __add__(self, other):
        return add_const(self, float(other)) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return add_const(self, float(other))

    def __sub__(self, other):
        return add_const(self, -float(other)) if _is_number(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, float(other)) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other)) if _is_number(other) else div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    """Wrap values as a non-trainable tensor, inheriting dtype unless given."""
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    return Tensor(arr, dtype=dtype, requires_grad=False)


def zeros(shape: Sequence[int], dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype, requires_grad=requires_grad)


def ones(shape: Sequence[int], dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), dtype=dtype, requires_grad=requires_grad)


def full(shape: Sequence[int], value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.full(shape, value), dtype=dtype)


# -- shape/dtype guards --------------------------------------------------------


def _need_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimMismatch(f"{op} requires a rank-2 tensor, got shape {t.dims}")


def _need_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimMismatch(f"{op}: shapes {a.dims} and {b.dims} differ")
    if a.data.dtype != b.data.dtype:
        raise DimMismatch(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


# -- core ops ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.dims[1] != b.dims[0]:
        raise DimMismatch(f"matmul: inner dims {a.dims} x {b.dims}")
    if a.data.dtype != b.data.dtype:
        raise DimMismatch(f"matmul: dtypes {a.data.dtype} and {b.data.dtype} differ")
    out = a.data @ b.data

    def vjp(g: Array):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def transpose(x: Tensor) -> Tensor:
    _need_2d(x, "transpose")

    def vjp(g: Array):
        return (g.T.copy(),)

    return Tensor._from_op(x.data.T.copy(), (x,), vjp, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "add")

    def vjp(g: Array):
        return g, g

    return Tensor._from_op(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "sub")

    def vjp(g: Array):
        return g, -g

    return Tensor._from_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "mul")

    def vjp(g: Array):
        return g * b.data, g * a.data

    return Tensor._from_op(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    out = a.data / b.data

    def vjp(g: Array):
        return g / b.data, -g * a.data / (b.data * b.data)

    return Tensor._from_op(out, (a, b), vjp, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g: Array):
        return (g * c,)

    return Tensor._from_op(x.data * c, (x,), vjp, "scale")


def add_const(x: Tensor, c: float) -> Tensor:
    def vjp(g: Array):
        return (g,)

    return Tensor._from_op(x.data + float(c), (x,), vjp, "add_const")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def vjp(g: Array):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), vjp, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # piecewise form avoids overflow in exp for large |x|
    out = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = out.astype(d.dtype, copy=False)

    def vjp(g: Array):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), vjp, "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(g: Array):
        return (g * out,)

    return Tensor._from_op(out, (x,), vjp, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: inputs must be strictly positive")
    out = np.log(x.data)

    def vjp(g: Array):
        return (g / x.data,)

    return Tensor._from_op(out, (x,), vjp, "log")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def vjp(g: Array):
        return (g * sign,)

    return Tensor._from_op(np.abs(x.data), (x,), vjp, "abs")


def pow_const(x: Tensor, p: float) -> Tensor:
    """x ** p elementwise. Requires x >= 0 when p is not an integer, p >= 1 for a bounded derivative at 0."""
    p = float(p)
    if not p.is_integer() and np.any(x.data < 0.0):
        raise DomainError("pow_const: negative base with fractional exponent")
    out = x.data**p

    def vjp(g: Array):
        return (g * p * x.data ** (p - 1.0),)

    return Tensor._from_op(out, (x,), vjp, "pow_const")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise DomainError(f"clamp: lo {lo} must be < hi {hi}")
    out = np.clip(x.data, lo, hi)
    interior = (x.data > lo) & (x.data < hi)

    def vjp(g: Array):
        return (g * interior,)

    return Tensor._from_op(out, (x,), vjp, "clamp")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "minimum")
    take_a = a.data <= b.data  # ties route gradient to the first operand

    def vjp(g: Array):
        return g * take_a, g * ~take_a

    return Tensor._from_op(np.where(take_a, a.data, b.data), (a, b), vjp, "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _need_same(a, b, "maximum")
    take_a = a.data >= b.data

    def vjp(g: Array):
        return g * take_a, g * ~take_a

    return Tensor._from_op(np.where(take_a, a.data, b.data), (a, b), vjp, "maximum")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rejects non-finite logits."""
    _need_2d(x, "softmax_rows")
    if not np.all(np.isfinite(x.data)):
        raise NonFinite("softmax_rows: logits contain NaN or infinity")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g: Array):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._from_op(out, (x,), vjp, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by elementwise affine.

    gain and bias are (1, n) tensors applied to every row; the op is
    fused so the backward pass is a single closed-form expression.
    """
    _need_2d(x, "layer_norm")
    n = x.dims[1]
    if gain.dims != (1, n) or bias.dims != (1, n):
        raise DimMismatch(f"layer_norm: affine params must be (1, {n}), got {gain.dims} and {bias.dims}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g: Array):
        gy = g * gain.data
        # d/dx of (x - mu) * inv with mu, inv both functions of the row
        mean_gy = gy.mean(axis=1, keepdims=True)
        mean_gy_xhat = (gy * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gy - mean_gy - xhat * mean_gy_xhat)
        ggain = (g * xhat).sum(axis=0, keepdims=True)
        gbias = g.sum(axis=0, keepdims=True)
        return gx, ggain, gbias

    return Tensor._from_op(out, (x, gain, bias), vjp, "layer_norm")


def tile_rows(v: Tensor, m: int) -> Tensor:
    """Repeat a (1, n) row m times into an (m, n) tensor."""
    if v.data.ndim != 2 or v.dims[0] != 1:
        raise DimMismatch(f"tile_rows expects a (1, n) tensor, got {v.dims}")
    if m < 1:
        raise DimMismatch(f"tile_rows: m must be >= 1, got {m}")

    def vjp(g: Array):
        return (g.sum(axis=0, keepdims=True),)

    return Tensor._from_op(np.repeat(v.data, m, axis=0), (v,), vjp, "tile_rows")


def sum_all(x: Tensor) -> Tensor:
    out = np.array([[x.data.sum()]], dtype=x.data.dtype)

    def vjp(g: Array):
        return (np.full_like(x.data, float(g.reshape(-1)[0])),)

    return Tensor._from_op(out, (x,), vjp, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.numel)


def sum_cols(x: Tensor) -> Tensor:
    """Sum across columns: (m, n) -> (m, 1)."""
    _need_2d(x, "sum_cols")
    out = x.data.sum(axis=1, keepdims=True)

    def vjp(g: Array):
        return (np.repeat(g, x.dims[1], axis=1),)

    return Tensor._from_op(out, (x,), vjp, "sum_cols")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _need_2d(x, "slice_cols")
    if not (0 <= start < stop <= x.dims[1]):
        raise DimMismatch(f"slice_cols: [{start}, {stop}) out of bounds for {x.dims}")
    out = x.data[:, start:stop].copy()

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return Tensor._from_op(out, (x,), vjp, "slice_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimMismatch("concat_cols: empty input")
    rows = parts[0].dims[0]
    for p in parts:
        _need_2d(p, "concat_cols")
        if p.dims[0] != rows:
            raise DimMismatch("concat_cols: row counts differ")
        if p.data.dtype != parts[0].data.dtype:
            raise DimMismatch("concat_cols: dtypes differ")
    widths = [p.dims[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def vjp(g: Array):
        grads = []
        at = 0
        for w in widths:
            grads.append(g[:, at : at + w])
            at += w
        return tuple(grads)

    return Tensor._from_op(out, tuple(parts), vjp, "concat_cols")


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    _need_2d(x, "gather_rows")
    idx = np.asarray(list(index), dtype=np.int64)
    if idx.size == 0:
        raise DimMismatch("gather_rows: empty index")
    if np.any(idx < 0) or np.any(idx >= x.dims[0]):
        raise DimMismatch(f"gather_rows: index out of range for {x.dims[0]} rows")
    out = x.data[idx].copy()

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._from_op(out, (x,), vjp, "gather_rows")


# -- graph and backward ---------------------------------------------------------


@dataclass(frozen=True)
class OpRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor


class Graph:
    """Topologically ordered trace of the ops behind a tensor.

    records[i].inputs always appear as outputs of earlier records or
    as leaves, so a reverse walk visits consumers before producers.
    """

    def __init__(self, records: list[OpRecord]):
        self.records = records

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order = _topo_order(root)
        return cls([OpRecord(t._op, t._parents, t) for t in order if t._parents])

    def __len__(self) -> int:
        return len(self.records)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS (parents before children)."""
    out: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            out.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every tensor requiring grad."""
    if loss.data.size != 1:
        raise NotScalar(f"backward expects a scalar, got shape {loss.dims}")
    if not loss.requires_grad:
        raise DisconnectedGraph("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    adjoint: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            acc = adjoint.get(id(parent))
            if acc is None:
                adjoint[id(parent)] = pg.astype(parent.data.dtype, copy=True)
            else:
                acc += pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """In-place p <- p - lr * grad(p); grads are zeroed afterwards."""
    for p in params:
        if p.grad is None:
            raise MissingGrad("sgd_step: parameter has no gradient buffer")
        p.data -= lr * p.grad
        p.grad[...] = 0.0


class Adam:
    """Adam with bias correction; same call shape as sgd_step via .step()."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[int, Array] = {}
        self._v: dict[int, Array] = {}

    def step(self, params: Sequence[Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            if p.grad is None:
                raise MissingGrad("Adam.step: parameter has no gradient buffer")
            key = id(p)
            m = self._m.setdefault(key, np.zeros_like(p.data))
            v = self._v.setdefault(key, np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * (p.grad * p.grad)
            mhat = m / (1.0 - b1**self.t)
            vhat = v / (1.0 - b2**self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad[...] = 0.0


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> Array:
    """Glorot/Xavier uniform init for a (fan_in, fan_out) weight matrix."""
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
