"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`cad.ops` build new
tensors through :meth:`Tensor.from_op`, which links the output to its inputs
and a backward closure whenever any input requires a gradient. Outputs of
purely constant computations carry no graph at all, so a frozen forward pass
holds nothing alive for backprop.

Every op also reports how many elements its backward rule keeps from the
forward pass. Inside a :func:`recording` block those counts, together with the
op's inputs and outputs, are appended to a trace that the memory model turns
into a manifest.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from cad.errors import ContractError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_FLOAT_KINDS = (np.float32, np.float64)


class Tensor:
    """N-dimensional array that may participate in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_KINDS:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ContractError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def from_op(
        cls,
        op: str,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward: BackwardFn,
        saved_elems: int = 0,
    ) -> Tensor:
        """Wrap an op result; ``saved_elems`` is what backward retains per call."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if _TRACES:
            _TRACES[-1].append(TraceEntry(op, tuple(parents), out, int(saved_elems)))
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> Tensor:
        """Leaf copy in another float dtype, keeping name and requires_grad."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag}, requires_grad={self.requires_grad})"


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through the tape, inputs before outputs."""
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Intermediate gradients live only for the duration of the call, so calling
    this twice on the same graph adds the gradients a second time.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


@dataclass
class TraceEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved_elems: int


@dataclass
class Trace:
    entries: list[TraceEntry] = field(default_factory=list)

    def append(self, entry: TraceEntry) -> None:
        self.entries.append(entry)


_TRACES: list[Trace] = []


@contextlib.contextmanager
def recording() -> Iterator[Trace]:
    """Collect every op executed inside the block, graph or not."""
    trace = Trace()
    _TRACES.append(trace)
    try:
        yield trace
    finally:
        _TRACES.pop()


def parameter(data, name: str, trainable: bool = True) -> Tensor:
    return Tensor(data, requires_grad=trainable, name=name)
