"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` whenever one of their
inputs requires a gradient. :func:`backprop` replays the recorded backward
rules in reverse order.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9

_ids = itertools.count()
_active_tapes: list["Tape"] = []
_finite_check = False


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Tensor:
    """Dense array node of a recorded computation."""

    __slots__ = ("id", "data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.id = next(_ids)
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scalar_mul(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations.

    Each entry is ``(input_nodes, output_node, backward)`` where ``backward``
    maps the output gradient to one gradient (or ``None``) per input.
    """

    def __init__(self):
        self.ops: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, inputs, output, backward):
        self.ops.append((tuple(inputs), output, backward))
        self._outputs.add(output.id)

    def contains(self, node: Tensor) -> bool:
        return node.id in self._outputs


@contextmanager
def no_tape():
    """Suspend recording, e.g. for target-network evaluation."""
    saved = list(_active_tapes)
    _active_tapes.clear()
    try:
        yield
    finally:
        _active_tapes.extend(saved)


@contextmanager
def finite_check(enabled: bool = True):
    global _finite_check
    prev = _finite_check
    _finite_check = enabled
    try:
        yield
    finally:
        _finite_check = prev


def _emit(op_kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if _finite_check and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op_kind}: non-finite values in output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _active_tapes:
        _active_tapes[-1].record(inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op_kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op_kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _scatter_rows(n_rows: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` into an (n_rows, ...) zero array at ``ids``."""
    out = np.zeros((n_rows,) + values.shape[1:])
    if ids.size == 0:
        return out
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    out[sorted_ids[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


# --------------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold leading batch axes into one product instead of summing per-batch outer products
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", a.data * b.data, (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _emit("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)

    def backward(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * x))),)

    return _emit("softplus", out, (a,), backward)


def softmax_lastdim(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_lastdim", y, (a,), backward)


def logsumexp_lastdim(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]

    def backward(g):
        return (g[..., None] * (e / s),)

    return _emit("logsumexp_lastdim", out, (a,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _emit("layernorm", out, (x, gamma, beta), backward)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of a 2-D table at integer ``ids`` (any shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_gather: ids outside [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        return (_scatter_rows(table.shape[0], ids.reshape(-1), g.reshape(-1, table.shape[1])),)

    return _emit("embedding_gather", out, (table,), backward)


def gather_lastdim(a: Tensor, idx) -> Tensor:
    """``out[..., j] = a[..., idx[..., j]]``; idx has a's ndim."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != a.ndim or idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather_lastdim: index shape {idx.shape} does not match {a.shape}")
    out = np.take_along_axis(a.data, idx, axis=-1)

    def backward(g):
        V = a.shape[-1]
        rows = np.arange(idx.size // idx.shape[-1]).repeat(idx.shape[-1])
        flat = rows * V + idx.reshape(-1)
        return (np.bincount(flat, weights=g.reshape(-1), minlength=a.size).reshape(a.shape),)

    return _emit("gather_lastdim", out, (a,), backward)


def index_add(values: Tensor, rows, n_rows: int) -> Tensor:
    """Scatter-add rows of ``values`` into a zero (n_rows, ...) array."""
    values = _as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape != values.shape[:1]:
        raise ShapeError(f"index_add: rows {rows.shape} vs values {values.shape}")
    out = _scatter_rows(n_rows, rows, values.data)
    return _emit("index_add", out, (values,), lambda g: (g[rows],))


def mean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.size // max(np.size(out), 1)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _emit("mean", np.asarray(out), (a,), backward)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tensors, backward)


def mask_fill(a: Tensor, mask, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, a.data)
    except ValueError:
        raise ShapeError(f"mask_fill: mask {mask.shape} vs input {a.shape}") from None
    if out.shape != a.shape:
        raise ShapeError(f"mask_fill: mask {mask.shape} vs input {a.shape}")
    return _emit("mask_fill", out, (a,), lambda g: (np.where(mask, 0.0, g),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax_lastdim": softmax_lastdim,
    "layernorm": layernorm,
    "gelu": gelu,
    "relu": relu,
    "embedding_gather": embedding_gather,
    "gather_lastdim": gather_lastdim,
    "mean": mean,
    "sum": sum,
    "square": square,
    "softplus": softplus,
    "scalar_mul": scalar_mul,
    "concat": concat,
    "mask_fill": mask_fill,
    "reshape": reshape,
    "transpose": transpose,
    "index_add": index_add,
    "logsumexp_lastdim": logsumexp_lastdim,
}


def eval_primitive(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {op_kind!r}") from None
    if op_kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------- gradients


def backprop(tape: Tape, seed: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``seed``.

    Returns a map from node id to gradient for every node that received one.
    Every tensor in ``wrt`` is guaranteed an entry (zeros when unreachable).
    """
    if seed.size != 1:
        raise AutodiffError(f"backprop: seed must be scalar, got shape {seed.shape}")
    if not tape.contains(seed):
        raise AutodiffError("backprop: seed was not produced on this tape")
    grads: dict[int, np.ndarray] = {seed.id: np.ones_like(seed.data)}
    for inputs, out, backward in reversed(tape.ops):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        for node, gi in zip(inputs, backward(g)):
            if gi is None or not node.requires_grad:
                continue
            if node.id in grads:
                grads[node.id] = grads[node.id] + gi
            else:
                grads[node.id] = gi
    if wrt is not None:
        for t in wrt:
            grads.setdefault(t.id, np.zeros_like(t.data))
    return grads


def grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on a fresh tape and return (value, gradients of params)."""
    with Tape() as tape:
        out = fn()
    if not tape.contains(out):  # output does not depend on anything differentiable
        return out.item(), [np.zeros_like(p.data) for p in params]
    g = backprop(tape, out, params)
    return out.item(), [g[p.id] for p in params]


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
                      max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` must be deterministic and read the current values of ``params``.
    Error per entry is ``|a - n| / max(1, |a|, |n|)``. ``max_entries`` checks a
    random subset per parameter instead of every entry.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, analytic = grad(fn, params)
    worst = 0.0
    with no_tape():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            ga = ga.reshape(-1)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + epsilon
                fp = fn().item()
                flat[j] = orig - epsilon
                fm = fn().item()
                flat[j] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"finite_diff_check: non-finite value at entry {j} of {p!r}")
                num = (fp - fm) / (2 * epsilon)
                err = abs(ga[j] - num) / max(1.0, abs(ga[j]), abs(num))
                worst = max(worst, err)
    return worst
