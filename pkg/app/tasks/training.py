"""
Minibatch Adam training on the engine, optionally restricted by an update mask.
"""
from typing import List, Optional, Sequence

import numpy as np

from app.engine import ops
from app.engine.optim import AdamState, adam_step
from app.engine.tensor import AutodiffTape, Tensor
from app.errors import NonFiniteError, ShapeMismatchError, TrainingDivergedError
from app.log import log_debug, log_info
from app.models.graph import LayerSpec, ModelGraph, init_graph
from app.models.network import Network
from app.models.schemas import TaskSpec, TrainConfig
from app.tasks.datasets import Dataset, TaskData


def fit(
    graph: ModelGraph,
    data: Dataset,
    loss_kind: str,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    update_mask: Optional[np.ndarray] = None,
    tag: str = "train",
) -> List[float]:
    """Train `graph` in place; entries where `update_mask` is False never change.

    Returns the mean loss of every epoch.
    """
    net = Network(graph, requires_grad=True)
    params = net.parameters()
    allowed = graph.trainable_mask()
    if update_mask is not None:
        if update_mask.shape != allowed.shape:
            raise ShapeMismatchError(f"update mask of size {update_mask.size} for {graph.num_params} params")
        allowed &= update_mask.astype(bool)
    state = AdamState.create([params], [allowed])
    rng = np.random.default_rng(seed)

    history = []
    for epoch in range(epochs):
        losses = []
        for x, y in data.batches(batch_size, rng):
            net.zero_grad()
            try:
                with AutodiffTape() as tape:
                    out = net(x, training=True)
                    loss = ops.loss(loss_kind, out, Tensor(y))
                tape.backward(loss)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"{tag}: epoch {epoch + 1} diverged: {e}")
            adam_step([params], lr, state)
            losses.append(loss.item())
        if not np.all(np.isfinite(graph.params)):
            raise TrainingDivergedError(f"{tag}: parameters became non-finite in epoch {epoch + 1}")
        history.append(float(np.mean(losses)))
        log_debug(f"{tag} epoch {epoch + 1}/{epochs}: loss {history[-1]:.5f}")
    return history


def check_compatible(graph: ModelGraph, spec: TaskSpec):
    """Fail early when a model cannot consume or produce a task's tensors."""
    if graph.output_dim != spec.output_dim:
        raise ShapeMismatchError(f"model has {graph.output_dim} outputs, task {spec.kind} needs {spec.output_dim}")
    if not graph.spatial_input:
        raise ShapeMismatchError("task inputs are images; the model must start with conv2d or batchnorm")
    sample = np.zeros((1,) + spec.input_shape, dtype=np.float32)
    out = Network(graph)(sample).data
    if spec.kind == "denoising" and out.shape[1:] != spec.input_shape:
        raise ShapeMismatchError(f"denoising model outputs {out.shape[1:]}, task needs {spec.input_shape}")
    if spec.kind != "denoising" and out.ndim != 2:
        raise ShapeMismatchError(f"{spec.kind} model must end in a 2-D output, got {out.shape[1:]}")


def train_model(layers: Sequence[LayerSpec], task: TaskData, cfg: TrainConfig, tag: str = "train") -> ModelGraph:
    """A model trained from scratch (Kaiming init) on `task`."""
    graph = init_graph(layers, np.random.default_rng(cfg.seed))
    check_compatible(graph, task.spec)
    log_info(f"{tag}: {len(graph.layers)} layers, {graph.num_params} params, {cfg.epochs} epochs")
    fit(graph, task.train, task.spec.loss_kind, epochs=cfg.epochs, lr=cfg.lr,
        batch_size=cfg.batch_size, seed=cfg.seed, tag=tag)
    return graph
