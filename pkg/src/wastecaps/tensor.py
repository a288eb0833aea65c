"""Dense N-d tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy float array. Arithmetic on tensors
records the producing operation so that ``backward()`` on a scalar loss
can sweep the graph in reverse topological order and accumulate
d(loss)/d(leaf) into ``grad`` for every leaf that requires it.
Gradients accumulate additively; callers zero them between steps.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A numpy-backed value that can participate in autodiff.

    ``grad`` stays ``None`` until ``backward()`` deposits something;
    tensors with ``requires_grad=False`` never accumulate a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op: str | None = None

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
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph construction -------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's grad.

        ``self`` must be a scalar (size 1). The recorded graph is consumed:
        operation closures are dropped after the sweep.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)
        for node in order:
            fn = node._backward
            if fn is None:
                continue
            if node.grad is None:
                node._backward = None
                node._parents = ()
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.ascontiguousarray(g, dtype=parent.data.dtype)
                else:
                    parent.grad = parent.grad + g
            # consume the tape: free closures and interior grad buffers
            node._backward = None
            node._parents = ()
            node.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological node order: every node precedes its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    """Wrap an op result, recording the edge iff grads are live."""
    requires = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were expanded by broadcasting to reach shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- primitive operations ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _result(a_data * b_data, (a, b), "mul", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), "neg", backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    a_data = a.data

    def backward(g):
        return (g * exponent * a_data ** (exponent - 1.0),)

    return _result(a_data ** exponent, (a,), "pow", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _result(a_data @ b_data, (a, b), "matmul", backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            expand = [ax % len(in_shape) for ax in axes]
            g = np.expand_dims(g, sorted(expand))
        return (np.broadcast_to(g, in_shape),)

    return _result(out, (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def relu(a: Tensor) -> Tensor:
    a_data = a.data

    def backward(g):
        return (g * (a_data > 0),)

    return _result(np.maximum(a_data, 0), (a,), "relu", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    a_data = a.data

    def backward(g):
        return (g / a_data,)

    return _result(np.log(a_data), (a,), "log", backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _result(out, (a,), "sqrt", backward)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _result(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), "transpose", backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward
    )


def _check_axis(op: str, a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    axis = _check_axis("softmax", a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _result(out, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_z
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), "log_softmax", backward)


def einsum(subscripts: str, *tensors: Tensor) -> Tensor:
    """Differentiable einsum for explicit subscripts without ellipses.

    The gradient for each operand is obtained by swapping its subscript
    with the output subscript, so every operand index must appear in the
    output or in some other operand (true for all contractions used here).
    """
    if "->" not in subscripts or "." in subscripts:
        raise ValueError(f"einsum: explicit subscripts required, got {subscripts!r}")
    lhs, out_sub = subscripts.split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(tensors):
        raise ValueError(f"einsum: {len(in_subs)} subscripts for {len(tensors)} operands")
    for i, sub in enumerate(in_subs):
        if len(set(sub)) != len(sub):
            raise ValueError(f"einsum: repeated index within operand {i} unsupported")
        available = set(out_sub).union(*(s for j, s in enumerate(in_subs) if j != i))
        if not set(sub) <= available:
            raise ValueError(f"einsum: cannot differentiate {subscripts!r} w.r.t. operand {i}")
    datas = [t.data for t in tensors]

    def backward(g):
        grads = []
        for i, sub in enumerate(in_subs):
            if not tensors[i].requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            operands = [datas[j] for j in range(len(datas)) if j != i]
            spec = ",".join([out_sub] + others) + "->" + sub
            grads.append(np.einsum(spec, g, *operands))
        return tuple(grads)

    return _result(np.einsum(subscripts, *datas), tuple(tensors), "einsum", backward)


# -- op dispatch ---------------------------------------------------------------

OPS = {
    "add": add,
    "mul": mul,
    "neg": neg,
    "pow": power,
    "matmul": matmul,
    "sum": tsum,
    "mean": tmean,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "einsum": einsum,
}


def forward_op(kind: str, *args, **kwargs) -> Tensor:
    """Apply a primitive op by name; records a graph node iff grads are live."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*args, **kwargs)


def backward(loss: Tensor):
    """Module-level alias: run reverse-mode sweep from a scalar loss."""
    loss.backward()
