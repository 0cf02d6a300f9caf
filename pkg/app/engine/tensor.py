"""
Dense float32 tensors and the autodiff tape.

Ops executed while any input requires grad are appended to the active
AutodiffTape; `backward` replays that tape in reverse execution order.
"""
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import AutodiffError, ShapeMismatchError

DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        grad: Optional[np.ndarray] = None,
        name: Optional[str] = None,
    ):
        # np.asarray keeps views: parameter tensors alias the flat vector
        self.data = np.asarray(data, dtype=DTYPE)
        if self.data.size == 0:
            raise ShapeMismatchError(f"tensor {name or ''} has an empty shape {self.data.shape}")
        if grad is not None and grad.shape != self.data.shape:
            raise ShapeMismatchError(f"grad shape {grad.shape} != data shape {self.data.shape}")
        self.grad = grad
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional["AutodiffTape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        # in place: parameter grads are views into a flat buffer
        self.grad += g.astype(DTYPE, copy=False).reshape(self.data.shape)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Context:
    """Scratch space an op forward leaves for its backward."""

    def __init__(self):
        self.saved: Dict[str, Any] = {}

    def save(self, **kwargs):
        self.saved.update(kwargs)

    def __getitem__(self, key: str):
        return self.saved[key]


@dataclass
class TapeEntry:
    op: Any
    ctx: Context
    inputs: Tuple[Tensor, ...]
    output: Tensor


@dataclass
class AutodiffTape:
    entries: List[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "AutodiffTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, op, ctx: Context, inputs: Sequence[Tensor], output: Tensor):
        output._tape = self
        self.entries.append(TapeEntry(op=op, ctx=ctx, inputs=tuple(inputs), output=output))

    def reset(self):
        for entry in self.entries:
            entry.output._tape = None
        self.entries.clear()

    def backward(self, loss: Tensor):
        if not self.entries:
            raise AutodiffError("tape is empty")
        if loss.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise AutodiffError("loss was not recorded on this tape")

        produced = {id(entry.output) for entry in self.entries}
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            grads = entry.op.backward(entry.ctx, upstream)
            for tensor, g in zip(entry.inputs, grads):
                if g is None or not tensor.requires_grad:
                    continue
                if id(tensor) in produced:
                    key = id(tensor)
                    pending[key] = pending[key] + g if key in pending else g
                else:
                    tensor.accumulate(g)


_local = threading.local()


def _stack() -> List[AutodiffTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[AutodiffTape]:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor):
    """Populate .grad of every requires_grad leaf reachable from `loss`."""
    if loss._tape is None:
        raise AutodiffError("loss is not on a tape (tape empty or loss computed without grad)")
    loss._tape.backward(loss)
