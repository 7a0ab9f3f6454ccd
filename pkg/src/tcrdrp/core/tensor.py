"""Tensors and the recording tape behind reverse-mode differentiation.

Operations only record while a :class:`Tape` is active (``with Tape() as tape``).
Outside a tape every op is a plain numpy computation returning constants, which
is what evaluation-mode forwards use.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class TapeError(RuntimeError):
    """Raised for misuse of the tape (non-scalar loss, foreign node, ...)."""


class Tensor:
    """Dense double-precision array with an optional handle into a tape.

    Parameters
    ----------
    values : array_like
        Copied into a read-only float64 array.
    requires_grad : bool
        Leaves with ``requires_grad=True`` are tracked by the active tape.
    """

    __slots__ = ("values", "requires_grad", "node_id", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.values = arr
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.values.reshape(()))

    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def assign(self, values) -> None:
        """Replace the stored values in place (optimizer updates only)."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.values.shape:
            raise ShapeError(f"assign: shape {arr.shape} != {self.values.shape}")
        arr.flags.writeable = False
        self.values = arr

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the functional forms live in tcrdrp.core.ops.
    def __add__(self, other):
        from tcrdrp.core import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from tcrdrp.core import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from tcrdrp.core import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from tcrdrp.core import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from tcrdrp.core import ops

        return ops.mul_scalar(self, -1.0)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64))


@dataclass
class _Record:
    op: str
    inputs: tuple  # node ids, None for constants
    output: int
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Leaf:
    tensor: Tensor
    node_id: int


class GradStore:
    """Gradients keyed by node id, looked up with the tensors themselves."""

    def __init__(self, tape: "Tape", grads: dict):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        nid = self._tape.node_of(tensor)
        if nid is None:
            return np.zeros(tensor.shape)
        g = self._grads.get(nid)
        return np.zeros(tensor.shape) if g is None else g

    def __contains__(self, tensor: Tensor) -> bool:
        return self._tape.node_of(tensor) is not None


class Tape:
    """Ordered log of differentiable operations.

    Node ids increase monotonically, so the record list is already in
    topological order and backward simply walks it in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._leaves: dict[int, _Leaf] = {}
        self._next_id = 0
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def node_of(self, tensor: Tensor) -> Optional[int]:
        if tensor._tape is self:
            return tensor.node_id
        leaf = self._leaves.get(id(tensor))
        if leaf is not None and leaf.tensor is tensor:
            return leaf.node_id
        return None

    def watch(self, tensor: Tensor) -> Optional[int]:
        """Return the node id of ``tensor``, registering tracked leaves."""
        nid = self.node_of(tensor)
        if nid is not None:
            return nid
        if tensor._tape is not None:
            raise TapeError("tensor was produced on a different tape")
        if not tensor.requires_grad:
            return None
        nid = self._new_id()
        self._leaves[id(tensor)] = _Leaf(tensor, nid)
        tensor.node_id = nid
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        ids = tuple(self.watch(t) for t in inputs)
        result = Tensor._wrap(out)
        if all(i is None for i in ids):
            return result
        nid = self._new_id()
        self.records.append(_Record(op, ids, nid, vjp))
        result.node_id = nid
        result._tape = self
        return result

    def backward(self, loss: Tensor) -> GradStore:
        if loss.size != 1 or loss.ndim > 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        root = self.node_of(loss)
        if root is None:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {root: np.ones(loss.shape)}
        for rec in reversed(self.records):
            g = grads.get(rec.output)
            if g is None:
                continue
            parts = rec.vjp(g)
            for nid, part in zip(rec.inputs, parts):
                if nid is None or part is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = part if prev is None else prev + part
        return GradStore(self, grads)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> GradStore:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaves not reachable from the loss read back as zero gradients.
    """
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise TapeError("loss is not attached to any tape")
    return tape.backward(loss)
