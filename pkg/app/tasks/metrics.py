"""
Task metrics: ACC, BER and PSNR.
"""
from typing import Optional, Union

import numpy as np

from app.errors import ShapeMismatchError
from app.models.graph import BatchNormStats, ModelGraph
from app.models.network import predict
from app.models.schemas import HIGHER_IS_BETTER, TaskSpec
from app.tasks.datasets import Dataset, TaskData, make_dataset

PSNR_MAX = 1.0
# reported for an exact reconstruction
PSNR_CAP = 100.0


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(f"accuracy needs (N, K) logits for N labels, got {logits.shape} / {labels.shape}")
    return float(np.mean(np.argmax(logits, axis=1) == labels.reshape(-1)))


def bit_error_rate(logits: np.ndarray, bits: np.ndarray) -> float:
    """Bits decoded by thresholding sigmoid(logits) at 0.5."""
    if logits.shape != bits.shape:
        raise ShapeMismatchError(f"bit_error_rate shapes differ: {logits.shape} vs {bits.shape}")
    decoded = (logits >= 0).astype(np.int64)
    return float(np.mean(decoded != bits.astype(np.int64)))


def psnr(pred: np.ndarray, target: np.ndarray, max_value: float = PSNR_MAX) -> float:
    """Per-image PSNR averaged over the set, each capped at PSNR_CAP."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    mse = (diff.reshape(len(diff), -1) ** 2).mean(axis=1)
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(max_value ** 2 / mse)
    return float(np.mean(np.minimum(values, PSNR_CAP)))


def score(metric: str, outputs: np.ndarray, targets: np.ndarray) -> float:
    if metric == "acc":
        return accuracy(outputs, targets)
    if metric == "ber":
        return bit_error_rate(outputs, targets)
    return psnr(outputs, targets)


def evaluate(
    model: ModelGraph,
    task: Union[TaskData, TaskSpec],
    split: Union[str, Dataset] = "test",
    bn_stats: Optional[BatchNormStats] = None,
) -> float:
    """Metric of `model` on a task split (evaluation-mode forward)."""
    spec = task.spec if isinstance(task, TaskData) else task
    if isinstance(split, Dataset):
        data = split
    else:
        task_data = task if isinstance(task, TaskData) else make_dataset(spec)
        data = getattr(task_data, split)
    if model.output_dim != spec.output_dim:
        raise ShapeMismatchError(f"model has {model.output_dim} outputs, task {spec.kind} needs {spec.output_dim}")
    outputs = predict(model, data.inputs, bn_stats=bn_stats)
    return score(spec.metric, outputs, data.targets)


def reduction(metric: str, baseline: float, current: float) -> float:
    """Performance reduction alpha: positive when `current` is worse than `baseline`."""
    return baseline - current if HIGHER_IS_BETTER[metric] else current - baseline
