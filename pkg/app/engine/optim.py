"""
Adam with optional update masks, and Kaiming initialization.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.engine.tensor import DTYPE, Tensor
from app.errors import AutodiffError, ShapeMismatchError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class _Moments:
    index: Optional[np.ndarray]
    m: np.ndarray
    v: np.ndarray


@dataclass
class AdamState:
    """Moment buffers per parameter tensor.

    With a mask, buffers exist only for entries whose mask is 1 and the
    remaining entries are never written.
    """

    moments: List[_Moments] = field(default_factory=list)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def create(cls, params: Sequence[Tensor], masks: Optional[Sequence[Optional[np.ndarray]]] = None) -> "AdamState":
        masks = masks if masks is not None else [None] * len(params)
        if len(masks) != len(params):
            raise ShapeMismatchError(f"{len(masks)} masks for {len(params)} parameter tensors")
        moments = []
        for p, mask in zip(params, masks):
            if mask is None:
                index = None
                n = p.size
            else:
                if mask.size != p.size:
                    raise ShapeMismatchError(f"mask of size {mask.size} for parameter of size {p.size}")
                index = np.flatnonzero(np.asarray(mask).reshape(-1))
                n = index.size
            moments.append(_Moments(index=index, m=np.zeros(n, dtype=DTYPE), v=np.zeros(n, dtype=DTYPE)))
        return cls(moments=moments)

    @property
    def buffer_size(self) -> int:
        return sum(int(mo.m.size) for mo in self.moments)


def adam_step(params: Sequence[Tensor], lr: float, state: AdamState):
    if len(params) != len(state.moments):
        raise ShapeMismatchError(f"state holds {len(state.moments)} buffers for {len(params)} parameters")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        if p.grad is None:
            raise AutodiffError(f"parameter {p.name or p.shape} has no grad")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for p, mo in zip(params, state.moments):
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        g = grad if mo.index is None else grad[mo.index]
        mo.m[...] = b1 * mo.m + (1.0 - b1) * g
        mo.v[...] = b2 * mo.v + (1.0 - b2) * g * g
        m_hat = mo.m / correction1
        v_hat = mo.v / correction2
        update = (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE)
        if mo.index is None:
            flat -= update
        else:
            flat[mo.index] -= update


def fan_in(shape: Sequence[int]) -> int:
    if len(shape) == 0:
        raise ShapeMismatchError("kaiming_init needs a non-empty shape")
    return int(np.prod(shape[1:])) if len(shape) > 1 else 1


def kaiming_normal(shape: Sequence[int], rng: np.random.Generator, fan: Optional[int] = None) -> np.ndarray:
    fan = fan_in(shape) if fan is None else fan
    if fan <= 0:
        raise ShapeMismatchError(f"kaiming_init needs a positive fan_in, shape {tuple(shape)}")
    std = np.sqrt(2.0 / fan)
    return (rng.standard_normal(tuple(shape)) * std).astype(DTYPE)


def kaiming_init(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """Normal(0, sqrt(2 / fan_in)); fan_in = c*s1*s2 for conv, input width for dense."""
    return Tensor(kaiming_normal(shape, rng), requires_grad=True)
