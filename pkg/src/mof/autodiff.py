"""Tape-based reverse-mode autodiff over numpy buffers.

Every reverse rule is written with the same differentiable ops it
differentiates, so running a reverse pass with ``create_graph=True``
records new nodes and the resulting gradients can be differentiated
again (gradient-through-a-gradient, Hessian-vector products).

Only scalar broadcasting is supported. Anything else that looks like
broadcasting (adding a bias row to every patch, weighting frame tokens)
goes through the explicit :func:`expand` op.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "gelu",
    "sqrt",
    "scale",
    "elementwise",
    "matmul",
    "reduce",
    "sum",
    "mean",
    "amax",
    "reshape",
    "transpose",
    "expand",
    "row_gather",
    "concat",
    "stack",
    "softmax_rows",
    "l2_normalize_rows",
    "dot",
    "grad",
    "hvp",
]

PRECISIONS = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    """Raised by log/div/normalize on an operand outside the op's domain."""

    def __init__(self, message: str, location: tuple[int, ...] | None = None):
        super().__init__(message)
        self.location = location


class Node:
    __slots__ = ("seq", "op", "parents", "backward")

    def __init__(self, seq: int, op: str, parents: tuple, backward: Callable):
        self.seq = seq
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.seq}, {self.op})"


class Tape:
    """Append-only op record.

    Nodes get strictly increasing sequence numbers, so every node's inputs
    precede it and sorting reachable nodes by ``seq`` is a valid reverse
    topological order. Node objects are owned by the tensors they produce,
    which lets dead subgraphs be garbage collected.
    """

    def __init__(self) -> None:
        self._counter = itertools.count()

    def record(self, op: str, parents: tuple, backward: Callable) -> Node:
        return Node(next(self._counter), op, parents, backward)


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.tape = Tape()


_state = _State()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def _grad_mode(flag: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = flag
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data, precision: str | None = None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if precision is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
        else:
            if precision not in PRECISIONS:
                raise AutodiffError(f"unknown precision {precision!r}")
            dtype = PRECISIONS[precision]
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

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

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", node={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}, {self.precision}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, precision: str = "f64", requires_grad: bool = False) -> Tensor:
    return Tensor(data, precision=precision, requires_grad=requires_grad)


def zeros(shape, precision: str = "f64") -> Tensor:
    return Tensor(np.zeros(shape, dtype=PRECISIONS[precision]))


def ones(shape, precision: str = "f64") -> Tensor:
    return Tensor(np.ones(shape, dtype=PRECISIONS[precision]))


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype)
    if arr.ndim != 0:
        raise ShapeError("non-scalar operands must be Tensors")
    return Tensor(arr)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.node = None
    return t


def _make(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = _wrap(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _state.tape.record(op, parents, backward)
    return out


def _check_dtype(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise AutodiffError(f"precision mismatch: {a.precision} vs {b.precision}")


def _first_bad(mask: np.ndarray) -> tuple[int, ...]:
    idx = int(np.flatnonzero(mask)[0])
    return tuple(int(i) for i in np.unravel_index(idx, mask.shape))


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    _check_dtype(a, b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcasting)")
    return a, b


def _unbroadcast(g: Tensor, like: Tensor) -> Tensor:
    # scalar operand collects the sum of the broadcast gradient
    if like.ndim == 0 and g.ndim != 0:
        return sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(neg(g), b)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(mul(g, b), a), _unbroadcast(mul(g, a), b)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    zero = b.data == 0
    if zero.any():
        raise DomainError(f"division by zero at divisor index {_first_bad(zero)}", _first_bad(zero))

    def backward(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return _make("div", a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (neg(g),))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scale", a.data * a.dtype.type(s), (a,), lambda g: (scale(g, s),))


def exp(a: Tensor) -> Tensor:
    out: Tensor

    def backward(g):
        return (mul(g, out),)

    out = _make("exp", np.exp(a.data), (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    bad = a.data <= 0
    if bad.any():
        loc = _first_bad(bad)
        raise DomainError(f"log of nonpositive value {a.data[loc]!r} at index {loc}", loc)
    return _make("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a: Tensor) -> Tensor:
    bad = a.data < 0
    if bad.any():
        loc = _first_bad(bad)
        raise DomainError(f"sqrt of negative value at index {loc}", loc)
    out: Tensor

    def backward(g):
        return (div(g, scale(out, 2.0)),)

    out = _make("sqrt", np.sqrt(a.data), (a,), backward)
    return out


def tanh(a: Tensor) -> Tensor:
    out: Tensor

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make("tanh", np.tanh(a.data), (a,), backward)
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU: 0.5 x (1 + tanh(c (x + k x^3)))."""
    x = a.data
    c = a.dtype.type(_GELU_C)
    k = a.dtype.type(_GELU_K)
    half = a.dtype.type(0.5)
    out_data = half * x * (1 + np.tanh(c * (x + k * x * x * x)))

    def backward(g):
        x2 = mul(a, a)
        t = tanh(scale(add(a, scale(mul(x2, a), _GELU_K)), _GELU_C))
        sech2 = sub(1.0, mul(t, t))
        inner = scale(add(1.0, scale(x2, 3 * _GELU_K)), _GELU_C)
        d = add(scale(add(1.0, t), 0.5), scale(mul(mul(a, sech2), inner), 0.5))
        return (mul(g, d),)

    return _make("gelu", out_data, (a,), backward)


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "gelu": gelu, "neg": neg, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name. ``scale-by-scalar`` takes a float ``b``."""
    if op in _BINARY:
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    if op in ("scale", "scale-by-scalar"):
        return scale(a, b)
    raise AutodiffError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _check_dtype(a, b)

    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make("matmul", a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make("transpose", data, (a,), lambda g: (transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _make("reshape", data, (a,), lambda g: (reshape(g, src),))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``a`` n times along it."""
    axis = _norm_axis(axis, a.ndim + 1)
    data = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _make("expand", data, (a,), lambda g: (sum(g, axis),))


def sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = a.shape

        def backward(g):
            return (mul(ones(shape, a.precision), g),)

        return _make("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)
    axis = _norm_axis(axis, a.ndim)
    n = a.shape[axis]
    return _make("sum", a.data.sum(axis=axis), (a,), lambda g: (expand(g, axis, n),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[_norm_axis(axis, a.ndim)]
    return scale(sum(a, axis), 1.0 / n)


def amax(a: Tensor, axis: int | None = None) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    if axis is None:
        flat = reshape(a, (a.size,))
        return reshape(amax(flat, 0), ())
    axis = _norm_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros(a.shape, dtype=a.dtype)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1, axis=axis)
    n = a.shape[axis]
    mask_t = _wrap(mask)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return _make("max", data, (a,), lambda g: (mul(expand(g, axis, n), mask_t),))


_REDUCE = {"sum": sum, "mean": mean, "max": amax}


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    if op not in _REDUCE:
        raise AutodiffError(f"unknown reduction {op!r}")
    return _REDUCE[op](a, axis)


def row_gather(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("row_gather takes a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range for {a.shape[0]} rows")
    n = a.shape[0]
    return _make("row_gather", a.data[idx], (a,), lambda g: (_row_scatter(g, idx, n),))


def _row_scatter(g: Tensor, idx: np.ndarray, n: int) -> Tensor:
    data = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    np.add.at(data, idx, g.data)
    return _make("row_scatter", data, (g,), lambda gg: (row_gather(gg, idx),))


def _slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    n = a.shape[axis]
    data = np.ascontiguousarray(a.data[tuple(sl)])
    return _make("slice", data, (a,), lambda g: (_pad(g, axis, start, n),))


def _pad(a: Tensor, axis: int, start: int, n: int) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (start, n - start - a.shape[axis])
    stop = start + a.shape[axis]
    return _make("pad", np.pad(a.data, widths), (a,), lambda g: (_slice(g, axis, start, stop),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = _norm_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        _check_dtype(tensors[0], t)
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != axis
        ):
            raise ShapeError(f"concat shape mismatch {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(_slice(g, axis, int(bounds[i]), int(bounds[i + 1])) for i in range(len(tensors)))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax of a rank-2 tensor, shifted by the (constant) row max."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows needs rank 2, got {a.shape}")
    shift = _wrap(np.repeat(a.data.max(axis=1, keepdims=True), a.shape[1], axis=1))
    e = exp(sub(a, shift))
    return div(e, expand(sum(e, 1), 1, a.shape[1]))


def l2_normalize_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs rank 2, got {a.shape}")
    sq = sum(mul(a, a), 1)
    zero = sq.data == 0
    if zero.any():
        raise DomainError(f"zero-norm row {int(np.flatnonzero(zero)[0])}", (int(np.flatnonzero(zero)[0]),))
    return div(a, expand(sqrt(sq), 1, a.shape[1]))


# ---------------------------------------------------------------------------
# reverse pass


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack_: list[Tensor] = [root]
    while stack_:
        t = stack_.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack_.extend(p for p in t.node.parents if p.requires_grad)
    order.sort(key=lambda t: t.node.seq, reverse=True)
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """d(output)/d(input) for each input.

    Inputs the output does not depend on get zero tensors. With
    ``create_graph`` the returned tensors are themselves on the tape.
    """
    inputs = list(inputs)
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            raise AutodiffError(f"input {i} does not require grad")
    wanted = {id(x) for x in inputs}
    found: dict[int, Tensor] = {}
    if output.node is None:
        # output is itself a leaf; only d(x)/d(x) is nonzero
        return [
            _wrap(np.ones(x.shape, x.dtype)) if x is output else _wrap(np.zeros(x.shape, x.dtype))
            for x in inputs
        ]

    grads: dict[int, Tensor] = {id(output): _wrap(np.ones(output.shape, output.dtype))}
    with _grad_mode(create_graph):
        for t in _topo(output):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if id(t) in wanted:
                found[id(t)] = g
            pgrads = t.node.backward(g)
            for p, pg in zip(t.node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if p.node is None:
                    if key in wanted:
                        found[key] = add(found[key], pg) if key in found else pg
                    continue
                grads[key] = add(grads[key], pg) if key in grads else pg
    out = []
    for x in inputs:
        g = found.get(id(x))
        out.append(g if g is not None else _wrap(np.zeros(x.shape, x.dtype)))
    return out


def hvp(loss: Tensor, params: Sequence[Tensor], v: Sequence[Tensor]) -> list[Tensor]:
    """Hessian-vector product via double reverse pass."""
    params = list(params)
    v = list(v)
    if len(v) != len(params):
        raise ShapeError("v must match params one-to-one")
    for p, vi in zip(params, v):
        if p.shape != vi.shape:
            raise ShapeError(f"v shape {vi.shape} does not match param shape {p.shape}")
    gs = grad(loss, params, create_graph=True)
    inner = None
    for g, vi in zip(gs, v):
        term = dot(g, vi.detach())
        inner = term if inner is None else add(inner, term)
    if not inner.requires_grad:
        return [_wrap(np.zeros(p.shape, p.dtype)) for p in params]
    return grad(inner, params)
