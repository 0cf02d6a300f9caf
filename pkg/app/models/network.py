"""
Runs a ModelGraph on the autodiff engine.

Parameter tensors alias the graph's flat vector and their grads alias one
flat grad buffer, so optimizers and masks work on flat indices.
"""
from typing import Dict, Optional, Tuple

import numpy as np

from app.engine import ops
from app.engine.tensor import DTYPE, Tensor
from app.models.graph import TRAINABLE_ROLES, BatchNormStats, ModelGraph


class Network:
    def __init__(self, graph: ModelGraph, requires_grad: bool = False, bn_stats: Optional[BatchNormStats] = None):
        self.graph = graph
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(graph.params) if requires_grad else None
        self._tensors: Dict[Tuple[int, str], Tensor] = {}
        for slot in graph.slots:
            if slot.role not in TRAINABLE_ROLES:
                continue
            grad_view = self.grad[slot.start:slot.stop].reshape(slot.shape) if requires_grad else None
            self._tensors[(slot.layer, slot.role)] = Tensor(
                graph.view(slot.layer, slot.role),
                requires_grad=requires_grad,
                grad=grad_view,
                name=f"{slot.layer}.{slot.role}",
            )
        # evaluation-mode statistics override (secret statistics on a stego graph)
        self.bn_stats = bn_stats

    def parameters(self) -> Tensor:
        """The whole flat vector as one tensor sharing the flat grad buffer."""
        return Tensor(self.graph.params, requires_grad=self.requires_grad, grad=self.grad, name="params")

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def _running(self, layer: int):
        if self.bn_stats is not None:
            return self.bn_stats.mean(layer).astype(DTYPE), self.bn_stats.var(layer).astype(DTYPE)
        return self.graph.view(layer, "running_mean"), self.graph.view(layer, "running_var")

    def __call__(self, x, *, training: bool = False, update_stats: bool = True) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, spec in enumerate(self.graph.layers):
            if spec.kind == "conv2d":
                h = ops.conv2d(h, self._tensors[(i, "weight")], self._tensors[(i, "bias")],
                               stride=spec.stride, padding=spec.padding)
            elif spec.kind == "dense":
                h = ops.dense(h, self._tensors[(i, "weight")], self._tensors[(i, "bias")])
            elif spec.kind == "batchnorm":
                mean, var = self._running(i)
                h = ops.batchnorm(
                    h,
                    self._tensors[(i, "gamma")],
                    self._tensors[(i, "beta")],
                    running_mean=mean,
                    running_var=var,
                    training=training,
                    update_stats=update_stats and self.bn_stats is None,
                )
            elif spec.kind == "relu":
                h = ops.relu(h)
            elif spec.kind == "maxpool":
                h = ops.maxpool2x2(h)
            elif spec.kind == "avgpool_global":
                h = ops.avgpool_global(h)
        return h


def predict(graph: ModelGraph, inputs: np.ndarray, batch_size: int = 256,
            bn_stats: Optional[BatchNormStats] = None) -> np.ndarray:
    """Evaluation-mode forward over `inputs` in batches."""
    net = Network(graph, requires_grad=False, bn_stats=bn_stats)
    outputs = [net(inputs[start:start + batch_size]).data for start in range(0, len(inputs), batch_size)]
    return np.concatenate(outputs, axis=0)
