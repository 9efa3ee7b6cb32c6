"""Dense tensors with reverse-mode automatic differentiation.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar traces the graph into a :class:`Tape` (the
topological record of primitives) and replays it in reverse.

Feature maps use the (N, C, H, W) row-major layout.  Head layers work on
rank-2 (N, F) arrays with the same machinery.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
CHECK_FINITE = True


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``np.float64`` for gradient audits)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Build a leaf tensor in the current default precision."""
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DTYPE))


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a primitive's forward result and register its backward closure.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


@dataclass
class Tape:
    """Primitive records in execution order, ending at the traced output."""

    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def trace(out: Tensor) -> Tape:
    """Recover the recorded primitives reachable from ``out`` in forward order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node.is_leaf:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if not p.is_leaf and id(p) not in seen:
                stack.append((p, False))
    return Tape(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto whatever is already stored; call :func:`zero_grad` between
    steps.  Returns the replayed tape.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = trace(loss)
    if not loss.requires_grad:
        return tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if CHECK_FINITE and not np.isfinite(pg).all():
                raise NonFiniteError(f"non-finite gradient flowing out of {node.op}")
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if b.ndim == 0 or a.shape == b.shape:
        return
    # per-channel (1, C, 1, 1) or any numpy-broadcastable shape onto a
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape != a.shape:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """Binary elementwise op: ``add``, ``sub`` or ``mul``; ``b`` may be a scalar or broadcast."""
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.data, b.data)
    x, y = a.data, b.data
    if op_kind == "add":
        out = x + y
        fn = lambda g: (g, _unbroadcast(g, y.shape) if b.requires_grad else None)
    elif op_kind == "sub":
        out = x - y
        fn = lambda g: (g, -_unbroadcast(g, y.shape) if b.requires_grad else None)
    elif op_kind == "mul":
        out = x * y
        fn = lambda g: (
            g * y if a.requires_grad else None,
            _unbroadcast(g * x, y.shape) if b.requires_grad else None,
        )
    else:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return make_op(op_kind, out.astype(x.dtype, copy=False), (a, b), fn)


def add(a, b):
    return elementwise("add", _as_tensor(a), b)


def sub(a, b):
    return elementwise("sub", _as_tensor(a), b)


def mul(a, b):
    return elementwise("mul", _as_tensor(a), b)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_op("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 product (N, F) @ (F, M)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return make_op("matmul", x @ y, (a, b), lambda g: (
        g @ y.T if a.requires_grad else None,
        x.T @ g if b.requires_grad else None,
    ))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return make_op("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two spatial axes."""
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + top + bottom, w + left + right), dtype=a.dtype)
    out[:, :, top:top + h, left:left + w] = a.data
    return make_op("pad2d", out, (a,),
                   lambda g: (np.ascontiguousarray(g[:, :, top:top + h, left:left + w]),))


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    n, c, h, w = a.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise DimensionError(f"crop window {(top, left, height, width)} outside {(h, w)}")

    def fn(g):
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    return make_op("crop2d", np.ascontiguousarray(a.data[:, :, top:top + height, left:left + width]),
                   (a,), fn)


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` wrt every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g
