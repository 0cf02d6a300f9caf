from .tensor import AutodiffTape, Tensor, backward
from .ops import OPS, forward_op
from .optim import AdamState, adam_step, kaiming_init

__all__ = [
    "AutodiffTape",
    "Tensor",
    "backward",
    "OPS",
    "forward_op",
    "AdamState",
    "adam_step",
    "kaiming_init",
]
