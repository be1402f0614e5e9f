"""Dense tensors with reverse-mode automatic differentiation.

Every operation records a node whose backward rule is itself written in
terms of :class:`Tensor` operations. Running the backward pass with
``create_graph=True`` therefore records a second graph, which is what the
gradient penalty needs (a gradient that is differentiated again).

Graph policy: a graph belongs to one forward pass. :func:`backward` and
:func:`grad` free the nodes they visit unless ``retain_graph`` (or
``create_graph``) is set.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientMap",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "grad",
    "backward",
    "input_gradient_node",
    "stack",
    "concatenate",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that disables graph recording."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class _Node:
    __slots__ = ("parents", "backward", "name")

    def __init__(self, parents, backward, name):
        self.parents = parents
        self.backward = backward
        self.name = name


class Tensor:
    """N-dimensional array that can take part in a computation graph.

    Parameters
    ----------
    data : array_like
        Values. Floating numpy arrays keep their dtype; anything else is
        converted to ``float32`` unless `dtype` is given.
    requires_grad : bool
        Mark the tensor as a differentiable leaf.
    """

    __slots__ = ("data", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if self._node is not None and not flag:
            raise ValueError("cannot clear requires_grad on a non-leaf tensor")
        self.requires_grad = flag
        return self

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum_to(self, shape):
        return sum_to(self, shape)


GradientMap = dict
"""Mapping from a leaf :class:`Tensor` (by identity) to its gradient array."""


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Build an op result and record a node when any parent needs gradients."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward, name)
    return out


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            sum_to(g, sa) if a.requires_grad else None,
            sum_to(g, sb) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            sum_to(g, sa) if a.requires_grad else None,
            sum_to(neg(g), sb) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("exponent must be a Python number")
    a = _wrap(a)
    p = float(p)
    if p == 2.0:
        data = a.data * a.data
    else:
        data = a.data ** np.asarray(p, dtype=a.dtype)

    def bw(g):
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(data, (a,), bw, "pow")


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = None

    def bw(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), bw, "exp")
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def mask_mul(a, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient flows into `mask`)."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=a.dtype)
    return _make(a.data * mask, (a,), lambda g: (mask_mul(g, mask),), "mask_mul")


# -- reductions and shape ---------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept), in_shape),)

    data = a.data.sum(axis=axes, keepdims=keepdims) if axes else a.data.copy()
    return _make(np.asarray(data, dtype=a.dtype), (a,), bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    in_shape = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, in_shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (transpose(g, inverse),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    data = np.broadcast_to(a.data, shape)
    return _make(data, (a,), lambda g: (sum_to(g, in_shape),), "broadcast_to")


def _reduction_axes(shape, target):
    lead = len(shape) - len(target)
    axes = list(range(lead))
    for i, n in enumerate(target):
        if n == 1 and shape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def sum_to(a, shape) -> Tensor:
    """Sum `a` down to `shape` (the adjoint of broadcasting)."""
    a = _wrap(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    axes = _reduction_axes(in_shape, shape)
    data = a.data.sum(axis=axes).reshape(shape) if axes else a.data.reshape(shape)
    return _make(np.asarray(data, dtype=a.dtype), (a,), lambda g: (broadcast_to(g, in_shape),), "sum_to")


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    in_shape = a.shape
    return _make(a.data[index], (a,), lambda g: (_scatter(g, in_shape, index),), "getitem")


def _scatter(g, shape, index) -> Tensor:
    """Adjoint of basic indexing: place `g` into zeros of `shape`."""
    g = _wrap(g)
    data = np.zeros(shape, dtype=g.dtype)
    data[index] = g.data
    return _make(data, (g,), lambda h: (getitem(h, index),), "scatter")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ndim = tensors[0].ndim + 1
    axis = axis % ndim

    def bw(g):
        idx = [slice(None)] * ndim
        out = []
        for i in range(len(tensors)):
            idx[axis] = i
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concatenate")


def matmul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")

    def bw(g):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def sample_norm(a) -> Tensor:
    """Euclidean norm of each sample (axis 0 kept, all other axes reduced).

    The gradient at a zero-norm sample is taken as zero rather than NaN.
    """
    a = _wrap(a)
    axes = tuple(range(1, a.ndim))
    data = np.sqrt((a.data * a.data).sum(axis=axes))
    out = None

    def bw(g):
        zero = (out.data == 0).astype(out.dtype)
        safe = add(out, zero)
        scale = reshape(div(g, safe), (-1,) + (1,) * len(axes))
        return (mul(a, scale),)

    out = _make(np.asarray(data, dtype=a.dtype), (a,), bw, "sample_norm")
    return out


# -- graph traversal ----------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        t, done = stack_.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Optional[Tensor] = None,
    create_graph: bool = False,
    retain_graph: Optional[bool] = None,
    allow_unused: bool = False,
) -> list:
    """Gradients of `output` with respect to each tensor in `inputs`.

    Parameters
    ----------
    output : Tensor
        Differentiated tensor; must be a single element unless
        `grad_output` is supplied.
    inputs : sequence of Tensor
        Leaves or intermediate nodes of the graph.
    create_graph : bool
        Record the backward computation so the returned gradients are
        differentiable themselves.
    retain_graph : bool, optional
        Keep the forward graph alive. Defaults to `create_graph`.
    allow_unused : bool
        Return ``None`` for inputs that `output` does not depend on instead
        of raising.

    Returns
    -------
    list of Tensor or None
    """
    if retain_graph is None:
        retain_graph = create_graph
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape, dtype=output.dtype))

    targets = {id(t) for t in inputs}
    order = _topo_order(output) if output.requires_grad else []

    # nodes on some path from output down to a requested input
    relevant = set()
    for t in order:
        if id(t) in targets or (
            t._node is not None and any(id(p) in relevant for p in t._node.parents)
        ):
            relevant.add(id(t))

    grads = {}
    if id(output) in relevant:
        grads[id(output)] = grad_output
    result = {}
    with _grad_mode(create_graph):
        for t in reversed(order):
            key = id(t)
            if key not in relevant:
                continue
            g = grads.pop(key, None)
            if g is None:
                continue
            if key in targets:
                result[key] = g
            node = t._node
            if node is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    if not retain_graph:
        for t in order:
            t._node = None

    out = []
    for t in inputs:
        g = result.get(id(t))
        if g is None and not allow_unused:
            raise ValueError(
                f"input {t.name or t!r} is not reachable from the differentiated tensor"
            )
        out.append(g)
    return out


def backward(
    scalar: Tensor,
    params: Optional[Iterable[Tensor]] = None,
    retain_graph: bool = False,
) -> GradientMap:
    """Reverse-mode gradients of a one-element tensor.

    Parameters
    ----------
    scalar : Tensor
        One-element tensor.
    params : iterable of Tensor, optional
        Leaves to report. Defaults to every ``requires_grad`` leaf reachable
        from `scalar`. Requested leaves that `scalar` does not depend on get
        a zero entry.

    Returns
    -------
    GradientMap
        ``{leaf: ndarray}`` keyed by tensor identity.
    """
    if scalar.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {scalar.shape}")
    if params is None:
        params = [t for t in _topo_order(scalar) if t.is_leaf and t.requires_grad] if scalar.requires_grad else []
    params = list(params)
    gs = grad(scalar, params, retain_graph=retain_graph, allow_unused=True)
    gmap: GradientMap = {}
    for p, g in zip(params, gs):
        gmap[p] = np.zeros_like(p.data) if g is None else np.asarray(g.data, dtype=p.dtype).reshape(p.shape)
    return gmap


def input_gradient_node(scalar: Tensor, wrt: Tensor) -> Tensor:
    """Gradient of `scalar` w.r.t. `wrt`, returned as a differentiable node.

    The forward graph is retained, so a loss built from the result (for
    example a gradient penalty) can be differentiated with respect to the
    parameters that produced `scalar`.
    """
    (g,) = grad(scalar, [wrt], create_graph=True)
    return g
