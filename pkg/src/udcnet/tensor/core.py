"""Dense tensors with a define-by-run tape for reverse-mode differentiation.

Every op result remembers its parents and an adjoint closure. A graph is
therefore recorded implicitly while ordinary Python code runs, and
`gradients` walks it backwards from a scalar output.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_CHECK_FINITE = True
_ids = itertools.count()


class TensorError(RuntimeError):
    """Base error for tensor-core failures; carries the offending node label."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(f"[{node}] {message}" if node else message)


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class GradientError(TensorError):
    pass


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


class Tensor:
    """Immutable n-d array node.

    ``data`` is a read-only numpy array. Leaves created with
    ``requires_grad=True`` are parameters; op outputs carry ``_parents`` and
    ``_adjoint`` while gradients are enabled.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "node_id",
                 "_parents", "_adjoint", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], adjoint: Callable,
                op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(_DEFAULT_DTYPE)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out.node_id = next(_ids)
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._adjoint = adjoint
        else:
            out._parents = ()
            out._adjoint = None
        if _CHECK_FINITE and not np.isfinite(data).all():
            raise NonFiniteError("non-finite values in op output", node=out.label)
        return out

    @property
    def label(self) -> str:
        return f"{self.op}#{self.node_id}" + (f"({self.name})" if self.name else "")

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
    def is_leaf(self) -> bool:
        return self._adjoint is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs one element, got shape {self.shape}", self.label)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def assign(self, value) -> None:
        """Replace a leaf's value in place (optimizer updates); shape and dtype are kept."""
        if not self.is_leaf:
            raise TensorError("only leaf tensors can be assigned", node=self.label)
        arr = np.array(value, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}", node=self.label)
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requiring leaf."""
        leaves = [n for n in _topo_order(self) if n.is_leaf and n.requires_grad]
        for leaf, g in zip(leaves, gradients(self, leaves)):
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, 1.0 / float(other))
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is None:
        arr = np.asarray(value)
        dtype = arr.dtype if arr.dtype.kind == "f" else _DEFAULT_DTYPE
    return Tensor(value, dtype=dtype)


def _topo_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
    return order


def trace(output: Tensor) -> list[dict]:
    """Topologically ordered op records of the graph that produced ``output``."""
    return [
        {"id": n.node_id, "op": n.op, "inputs": [p.node_id for p in n._parents],
         "shape": n.shape}
        for n in _topo_order(output)
    ]


def _released(g, mask):
    raise GradientError("graph was released by an earlier gradients() call; "
                        "pass release=False to differentiate it again")


def gradients(output: Tensor, wrt: Sequence[Tensor] | Mapping[str, Tensor],
              seed: np.ndarray | None = None, release: bool = True):
    """Reverse-mode gradients of a scalar ``output`` with respect to ``wrt``.

    Returns a list (or dict when ``wrt`` is a mapping) of numpy arrays shaped
    like the corresponding inputs; inputs unreachable from ``output`` get
    zeros. Only nodes on a path to some requested input are differentiated.
    With ``release`` the adjoint closures of the differentiated nodes are
    dropped afterwards so their activations can be freed; differentiating
    through a released node later raises GradientError.
    """
    named = isinstance(wrt, Mapping)
    targets = list(wrt.values()) if named else list(wrt)
    if seed is None:
        if output.data.size != 1:
            raise GradientError(f"backward needs a scalar output, got shape {output.shape}",
                                node=output.label)
        seed = np.ones_like(output.data)
    target_ids = {id(t) for t in targets}
    order = _topo_order(output)

    needed: set[int] = set()
    for node in order:
        if (id(node) in target_ids or node._adjoint is _released
                or any(id(p) in needed for p in node._parents)):
            needed.add(id(node))

    grads: dict[int, np.ndarray] = {}
    found: dict[int, np.ndarray] = {}
    if id(output) in needed:
        grads[id(output)] = np.asarray(seed, dtype=output.dtype)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in target_ids:
            found[id(node)] = g
        if node._adjoint is None:
            continue
        mask = tuple(id(p) in needed for p in node._parents)
        parent_grads = node._adjoint(g, mask)
        for parent, pg, need in zip(node._parents, parent_grads, mask):
            if not need or pg is None:
                continue
            key = id(parent)
            if pg.shape != parent.shape:
                raise GradientError(
                    f"adjoint produced shape {pg.shape}, expected {parent.shape}",
                    node=node.label)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if release:
        for node in order:
            if id(node) not in needed:
                continue
            if node._parents:
                node._adjoint = _released
                node._parents = ()
    result = [found.get(id(t), np.zeros_like(t.data)) for t in targets]
    if named:
        return dict(zip(wrt.keys(), result))
    return result


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
