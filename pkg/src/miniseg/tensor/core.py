"""Tensor type and reverse-mode autodiff machinery.

Every op that touches a tensor with ``requires_grad`` records a :class:`Node`
carrying a monotonically increasing sequence number. ``backward`` collects the
nodes reachable from the loss into a :class:`Tape` ordered by that sequence
number and replays the adjoints in reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections import defaultdict
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


class TapeError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("seq", "op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Dense float array with optional gradient.

    Feature maps are 4-D ``(N, C, H, W)``; parameters and losses may have any
    rank. Data is kept in the dtype it was created with (float32 by default,
    float64 when a caller asks for it, e.g. the finite-difference checker).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        elif dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul_broadcast(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import ops

        return ops.sum_all(self)

    def mean(self) -> "Tensor":
        from . import ops

        return ops.mean_all(self)

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, inputs)


def make_result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op's output, recording a node when any parent needs a gradient."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward_fn)
    return out


class Tape:
    """Ordered record of the ops that produced a loss.

    Built from the graph reachable from ``root``; ``nodes`` are sorted by
    execution order so that replay visits each op once, last op first.
    """

    def __init__(self, root: Tensor):
        seen = set()
        owners = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            owners[node.seq] = t
            stack.extend(node.parents)
        self.entries = [owners[s] for s in sorted(owners)]

    @property
    def nodes(self) -> list:
        return [t._node for t in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, root: Tensor) -> None:
        grads: dict = defaultdict(lambda: None)
        grads[id(root)] = np.ones_like(root.data)
        for t in reversed(self.entries):
            node = t._node
            g = grads.pop(id(t), None)
            if g is None:
                node.consumed = True
                continue
            parent_grads = node.backward_fn(g)
            node.consumed = True
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise TapeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
                if p._node is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``inputs`` lists leaves that must end up with a gradient buffer; any of
    them not reached from ``loss`` receives zeros.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss was not produced by a recorded op")
    if loss._node.consumed:
        raise TapeError("backward already ran on this graph; rebuild it with a fresh forward pass")
    tape = Tape(loss)
    tape.replay(loss)
    if inputs is not None:
        for p in inputs:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- FLOP accounting --------------------------------------------------------

class FlopCounter:
    """Collects per-op FLOP counts while active.

    ``scope`` names (pushed by modules) let the totals be broken down per
    submodule.
    """

    def __init__(self):
        self.by_op: dict = defaultdict(int)
        self.by_scope: dict = defaultdict(int)
        self.total = 0
        self._scopes: list = []

    def add(self, op: str, flops: int) -> None:
        flops = int(flops)
        self.total += flops
        self.by_op[op] += flops
        key = self._scopes[0] if self._scopes else "<root>"
        self.by_scope[key] += flops


def _counter() -> Optional[FlopCounter]:
    return getattr(_state, "flop_counter", None)


@contextlib.contextmanager
def count_flops_ctx():
    counter = FlopCounter()
    prev = _counter()
    _state.flop_counter = counter
    try:
        yield counter
    finally:
        _state.flop_counter = prev


@contextlib.contextmanager
def flop_scope(name: str):
    counter = _counter()
    if counter is None:
        yield
        return
    counter._scopes.append(name)
    try:
        yield
    finally:
        counter._scopes.pop()


def record_flops(op: str, flops: int) -> None:
    counter = _counter()
    if counter is not None:
        counter.add(op, flops)
