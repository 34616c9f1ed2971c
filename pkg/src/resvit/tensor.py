"""Dense tensors with reverse-mode automatic differentiation.

Every operation on tensors that require gradients records a node holding
its parents and a closure computing the parents' gradients.  ``backward``
visits reachable nodes once, in reverse creation order, and accumulates
gradients additively, so a tensor consumed by several operations (or a
parameter shared between blocks) receives the sum of its upstream
gradients.
"""

from __future__ import annotations

import contextlib
import copy
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError

_ids = itertools.count()
_default_dtype = np.dtype(np.float32)
_grad_enabled = True


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data
    return np.asarray(data, dtype=_default_dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes along which ``shape`` was broadcast."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    Parameters
    ----------
    data : array_like
        Values.  Floating arrays keep their dtype, anything else is cast
        to the current default dtype.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._needs: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self.node_id = next(_ids)

    def __deepcopy__(self, memo) -> "Tensor":
        # copies are new graph nodes; sharing node_id would merge them in backward
        out = self.__class__.__new__(self.__class__)
        memo[id(self)] = out
        for key, value in self.__dict__.items():
            out.__dict__[key] = copy.deepcopy(value, memo)
        out.node_id = next(_ids)
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return _unary(self, self.data.astype(dtype),
                      lambda g: g.astype(self.dtype), "astype")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- backward
    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor into every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.node_id in nodes:
                continue
            nodes[node.node_id] = node
            stack.extend(p for p, need in zip(node._parents, node._needs) if need)

        grads = {self.node_id: grad}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = grads.pop(node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, need, pg in zip(node._parents, node._needs, node._backward(g)):
                if pg is None or not need:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg

    # ------------------------------------------------------------- arithmetic
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -self._coerce(other))

    def __rsub__(self, other):
        return add(self._coerce(other), -self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return mul(self, self._coerce(1.0 / np.asarray(other, dtype=self.dtype)))

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g, "neg")

    def __pow__(self, exponent: float):
        exponent = float(exponent)
        x = self.data
        return _unary(self, x ** exponent,
                      lambda g: g * exponent * x ** (exponent - 1.0), "pow")

    def __matmul__(self, other):
        from .functional import matmul
        return matmul(self, self._coerce(other))

    def __getitem__(self, index):
        x = self.data

        def back(g):
            out = np.zeros_like(x)
            if _fancy(index):
                np.add.at(out, index, g)
            else:
                out[index] = g
            return out

        return _unary(self, x[index], back, "getitem")

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        x = self.data

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape).copy()

        return _unary(self, x.sum(axis=axis, keepdims=keepdims), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        x = self.data
        count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def abs(self):
        x = self.data
        return _unary(self, np.abs(x), lambda g: g * np.sign(x), "abs")

    def exp(self):
        y = np.exp(self.data)
        return _unary(self, y, lambda g: g * y, "exp")

    # ------------------------------------------------------------------ shape
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self.data
        return _unary(self, x.reshape(shape), lambda g: g.reshape(x.shape), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _unary(self, self.data.transpose(axes),
                      lambda g: g.transpose(inverse), "transpose")

    @property
    def T(self):
        return self.transpose()


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``group`` names a shared-group: every block that ties its weights holds
    the very same Parameter object, so the storage is aliased and backward
    leaves the summed gradient in one place.
    """

    def __init__(self, data, group: Optional[str] = None):
        super().__init__(data, requires_grad=True)
        self.group = group

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, group={self.group})"


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable,
              op: str = "") -> Tensor:
    """Wrap ``data`` as the result of an operation on ``parents``.

    ``backward`` maps the output gradient to a tuple with one entry per
    parent (``None`` where no gradient is needed).
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # freeze the flags now so later requires_grad toggles cannot leak gradient
        out._parents = tuple(parents)
        out._needs = tuple(p.requires_grad for p in parents)
        out._backward = backward
        out._op = op
    return out


def _unary(x: Tensor, data: np.ndarray, back: Callable, op: str) -> Tensor:
    return make_node(data, (x,), lambda g: (back(g),), op)


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def back(g):
        return (unbroadcast(g, sa) if a.requires_grad else None,
                unbroadcast(g, sb) if b.requires_grad else None)

    return make_node(a.data + b.data, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data

    def back(g):
        return (unbroadcast(g * y, x.shape) if a.requires_grad else None,
                unbroadcast(g * x, y.shape) if b.requires_grad else None)

    return make_node(x * y, (a, b), back, "mul")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) if t.requires_grad else None
                     for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]))

    return make_node(data, tensors, back, "concat")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)
