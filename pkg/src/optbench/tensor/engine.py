"""Tensors and the recording tape used for reverse-mode differentiation.

Primitives (see :mod:`optbench.tensor.ops`) append a :class:`Node` to the
active :class:`Graph` whenever one of their operands requires a gradient.
Outside of :func:`forward` nothing is recorded, which is what evaluation code
relies on.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = " and ".join(str(list(s)) for s in self.shapes)
        msg = f"{op}: incompatible shapes {listed}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    """Backward was requested on something that cannot be differentiated."""


class Tensor:
    """A dense float array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_graph")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._graph: Graph | None = None

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    @property
    def graph(self) -> Graph | None:
        return self._graph

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    # Arithmetic sugar; the primitives live in ops.
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
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def _not_scalar(t: Tensor):
    raise ShapeError("item", t.shape, detail="tensor is not a scalar")


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Graph:
    """Ordered list of nodes; operands always precede their users."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self.consumed = False

    def __enter__(self) -> Graph:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        if self.consumed:
            raise GraphError("cannot record onto a consumed graph")
        for t in inputs:
            if t.requires_grad and t._node is None and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self.leaves.append(t)
        output.requires_grad = True
        output._node = Node(op, inputs, output, vjp)
        output._graph = self
        self.nodes.append(output._node)


_local = threading.local()


def _stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


def forward(builder: Callable[..., Tensor], *args, **kwargs) -> Tensor:
    """Evaluate ``builder`` while recording, and return its scalar result.

    The returned tensor carries the graph needed by :func:`backward`.
    """
    graph = Graph()
    with graph:
        loss = builder(*args, **kwargs)
    if not isinstance(loss, Tensor):
        loss = Tensor(loss)
    if loss.size != 1:
        raise ShapeError("forward", loss.shape, detail="loss must be a scalar")
    loss._graph = graph
    return loss


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor of the loss' graph that requires one.

    Leaf gradients are overwritten, not accumulated across calls.  The graph is
    consumed: its saved activations are released and a second call fails.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    graph = loss._graph
    if graph is None:
        raise GraphError("loss was not produced by forward()")
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward()")

    grads: dict[int, np.ndarray] = {}
    if loss._node is None and loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.dtype)
        graph.leaves = [loss]
    elif loss._node is not None:
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
        # break the tensor <-> node cycle so activations are freed by refcount
        node.output._node = None
        node.inputs, node.vjp = (), None
    for leaf in graph.leaves:
        g = grads.pop(id(leaf), None)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype)

    for node in graph.nodes:
        node.output._node = None
        node.inputs, node.vjp = (), None
    graph.nodes = []
    graph.consumed = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
