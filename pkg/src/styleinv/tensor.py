"""Dense tensors and a tape-based reverse-mode differentiation engine.

Every differentiable operation is registered as a *kind* with a forward rule
and a backward rule.  ``forward_op`` evaluates a kind and, when a ``Graph``
is active, appends a node to it.  ``backward`` walks the nodes once in
reverse and returns the gradient of a scalar loss for every node.

Arrays are plain numpy arrays; the precision of a computation is the dtype
of its inputs (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are invalid for an operation kind."""


class GraphError(RuntimeError):
    pass


class Tensor:
    """Immutable wrapper around an ndarray, optionally bound to a graph node."""

    __slots__ = ("data", "node", "graph")

    def __init__(self, data, node: Optional[int] = None, graph: Optional["Graph"] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.graph = graph

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, node={self.node})"

    # arithmetic sugar; everything routes through forward_op
    def __add__(self, other):
        return forward_op("add", [self, _as_tensor(other, self.dtype)])

    __radd__ = __add__

    def __sub__(self, other):
        return forward_op("sub", [self, _as_tensor(other, self.dtype)])

    def __rsub__(self, other):
        return forward_op("sub", [_as_tensor(other, self.dtype), self])

    def __mul__(self, other):
        return forward_op("mul", [self, _as_tensor(other, self.dtype)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return forward_op("div", [self, _as_tensor(other, self.dtype)])

    def __neg__(self):
        return forward_op("mul", [self, _as_tensor(-1.0, self.dtype)])

    def __matmul__(self, other):
        return forward_op("matmul", [self, other])


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class OpKind:
    name: str
    forward: Callable[..., Tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[Optional[np.ndarray]]]
    differentiable: bool = True


# kind name -> OpKind.  forward(*arrays, **attrs) -> (out, ctx);
# backward(grad_out, ctx, *arrays, **attrs) -> one grad (or None) per input.
OPS: Dict[str, OpKind] = {}


def register_op(name: str, differentiable: bool = True):
    def wrap(cls):
        OPS[name] = OpKind(name, cls.forward, cls.backward, differentiable)
        return cls

    return wrap


@dataclass
class Node:
    kind: str
    inputs: Tuple[int, ...]
    output: Tensor
    attrs: Dict[str, Any] = field(default_factory=dict)
    ctx: Any = None
    input_arrays: Tuple[np.ndarray, ...] = ()


_ACTIVE: List["Graph"] = []


class Graph:
    """Topologically ordered record of the operations applied since activation.

    Use as a context manager; leaves (parameters, inputs) are registered with
    :meth:`leaf` and keep their node id for gradient lookup.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _add(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, data, name: Optional[str] = None) -> Tensor:
        arr = data.data if isinstance(data, Tensor) else np.asarray(data)
        t = Tensor(arr)
        nid = self._add(Node("leaf", (), t, {"name": name}))
        t.node, t.graph = nid, self
        return t

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        return backward(self, loss)


def active_graph() -> Optional[Graph]:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active graph."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """Evaluate operation ``kind`` on ``inputs``; record it if a graph is active."""
    try:
        op = OPS[kind]
    except KeyError:
        raise KeyError(f"unknown operation kind {kind!r}") from None
    attrs = attrs or {}
    arrays = tuple(t.data if isinstance(t, Tensor) else np.asarray(t) for t in inputs)
    out, ctx = op.forward(*arrays, **attrs)
    g = active_graph()
    if g is None:
        return Tensor(out)
    ids = []
    for t, arr in zip(inputs, arrays):
        if isinstance(t, Tensor) and t.graph is g:
            ids.append(t.node)
        else:
            # constants enter the graph as anonymous leaves
            ids.append(g.leaf(arr).node)
    t_out = Tensor(out)
    nid = g._add(Node(kind, tuple(ids), t_out, attrs, ctx, arrays))
    t_out.node, t_out.graph = nid, g
    return t_out


def backward(graph: Graph, loss) -> Dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every node of ``graph``.

    ``loss`` may be a Tensor recorded on the graph or a node id.  Returns a
    map node-id -> gradient array (same shape as that node's output).
    """
    loss_id = loss.node if isinstance(loss, Tensor) else int(loss)
    if isinstance(loss, Tensor) and loss.graph is not graph:
        raise GraphError("loss tensor is detached from this graph")
    if loss_id is None or not 0 <= loss_id < len(graph.nodes):
        raise GraphError(f"node {loss_id} is not part of the graph")
    out = graph.nodes[loss_id].output
    if out.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {out.shape}")

    grads: Dict[int, np.ndarray] = {loss_id: np.ones_like(out.data)}
    for nid in range(loss_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        if node.kind == "leaf":
            continue
        op = OPS[node.kind]
        if not op.differentiable:
            continue
        in_grads = op.backward(g, node.ctx, *node.input_arrays, **node.attrs)
        for src, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if src in grads:
                grads[src] = grads[src] + ig
            else:
                grads[src] = ig
    return grads


# ---------------------------------------------------------------------------
# elementwise and linear-algebra kinds


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast extents {a.shape} and {b.shape}") from None


@register_op("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, ctx, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@register_op("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _check_broadcast("sub", a, b)
        return a - b, None

    @staticmethod
    def backward(g, ctx, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@register_op("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast("mul", a, b)
        return a * b, None

    @staticmethod
    def backward(g, ctx, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register_op("div")
class _Div:
    @staticmethod
    def forward(a, b):
        _check_broadcast("div", a, b)
        return a / b, None

    @staticmethod
    def backward(g, ctx, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@register_op("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible extents {a.shape} and {b.shape}")
        return a @ b, None

    @staticmethod
    def backward(g, ctx, a, b):
        return g @ b.T, a.T @ g


@register_op("square")
class _Square:
    @staticmethod
    def forward(a):
        return a * a, None

    @staticmethod
    def backward(g, ctx, a):
        return (2 * a * g,)


@register_op("log")
class _Log:
    @staticmethod
    def forward(a, floor: float = 0.0):
        return np.log(np.maximum(a, floor) if floor > 0 else a), None

    @staticmethod
    def backward(g, ctx, a, floor: float = 0.0):
        if floor > 0:
            return (np.where(a >= floor, g / np.maximum(a, floor), 0.0).astype(a.dtype),)
        return (g / a,)


@register_op("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims: bool = False):
        return np.sum(a, axis=axis, keepdims=keepdims), None

    @staticmethod
    def backward(g, ctx, a, axis=None, keepdims: bool = False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)


@register_op("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims: bool = False):
        return np.mean(a, axis=axis, keepdims=keepdims), None

    @staticmethod
    def backward(g, ctx, a, axis=None, keepdims: bool = False):
        count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype),)


@register_op("clip")
class _Clip:
    @staticmethod
    def forward(a, lo: float = 0.0, hi: float = 1.0):
        return np.clip(a, lo, hi), None

    @staticmethod
    def backward(g, ctx, a, lo: float = 0.0, hi: float = 1.0):
        return (g * ((a >= lo) & (a <= hi)),)


@register_op("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape=()):
        return a.reshape(shape), None

    @staticmethod
    def backward(g, ctx, a, shape=()):
        return (g.reshape(a.shape),)


@register_op("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis: int = 1):
        ref = arrays[0].shape
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(
                arr.shape[i] != ref[i] for i in range(len(ref)) if i != axis
            ):
                raise ShapeError(f"concat: extents {ref} and {arr.shape} differ off axis {axis}")
        return np.concatenate(arrays, axis=axis), None

    @staticmethod
    def backward(g, ctx, *arrays, axis: int = 1):
        bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return tuple(np.split(g, bounds, axis=axis))


# ---------------------------------------------------------------------------
# convenience wrappers


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("sum", [x], {"axis": axis, "keepdims": keepdims})


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("mean", [x], {"axis": axis, "keepdims": keepdims})


def square(x: Tensor) -> Tensor:
    return forward_op("square", [x])


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    return forward_op("log", [x], {"floor": floor})


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return forward_op("clip", [x], {"lo": lo, "hi": hi})


def reshape(x: Tensor, shape) -> Tensor:
    return forward_op("reshape", [x], {"shape": tuple(shape)})


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    return forward_op("concat", list(xs), {"axis": axis})


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameter(s): {', '.join(missing)}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# finite-difference verification


ZERO_GRAD_NORM = 1e-7


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    wrt: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between engine and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor.  Inputs are promoted to float64.
    The error per input is ``||a - n|| / max(||a||, ||n||)`` (Euclidean norms),
    maxed over all checked inputs; when both norms are below
    ``ZERO_GRAD_NORM`` the absolute ``||a - n||`` is used instead.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    with Graph() as g:
        leaves = [g.leaf(a) for a in arrays]
        loss = fn(*leaves)
    grads = backward(g, loss)
    worst = 0.0
    for i in wrt:
        analytic = grads.get(leaves[i].node, np.zeros_like(arrays[i]))

        def scalar(xi, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(xi)
            return float(fn(*args).data)

        numeric = numerical_grad(scalar, arrays[i], eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        diff = float(np.linalg.norm(analytic - numeric))
        # an identically-zero gradient (e.g. a bias feeding a normalisation)
        # leaves only rounding noise, so compare it in absolute terms
        worst = max(worst, diff if scale < ZERO_GRAD_NORM else diff / scale)
    return worst


@register_op("take")
class _Take:
    # x[index] along the leading axis
    @staticmethod
    def forward(a, index=0):
        return a[index], None

    @staticmethod
    def backward(g, ctx, a, index=0):
        out = np.zeros_like(a)
        out[index] = g
        return (out,)


def take(x: Tensor, index: int) -> Tensor:
    return forward_op("take", [x], {"index": int(index)})
