"""
Operations shared by the command line and the HTTP surface.
"""
from pathlib import Path
from typing import Optional, Union

import numpy as np

from app.config import get_settings
from app.disguise.importance import score_filters
from app.errors import ConfigError
from app.models.graph import ModelGraph
from app.models.schemas import CapacityResult, EvaluateResult, InspectResult, LayerSummary, TaskSpec
from app.models.selection import FilterSelection
from app.models.serialization import load_model
from app.tasks.datasets import make_dataset
from app.tasks.metrics import evaluate


def read_model(path: Union[str, Path]) -> ModelGraph:
    try:
        return load_model(path)
    except OSError as e:
        raise ConfigError(f"cannot read model file {path}: {e}")


def evaluate_model(model: ModelGraph, task: TaskSpec, split: str = "test") -> EvaluateResult:
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    value = evaluate(model, make_dataset(task), split)
    return EvaluateResult(task=task.kind, metric=task.metric, value=value)


def capacity(secret: ModelGraph, stego: ModelGraph) -> CapacityResult:
    """Expansion rate e = N_stego / N_secret - 1."""
    return CapacityResult(
        secret_params=secret.num_params,
        stego_params=stego.num_params,
        expansion_rate=stego.num_params / secret.num_params - 1.0,
    )


def inspect_model(model: ModelGraph, task: Optional[TaskSpec] = None, stego_task: Optional[TaskSpec] = None,
                  lambda_g: float = 0.01, batches: Optional[int] = None) -> InspectResult:
    """Architecture and parameter summary; filter scores when a task is given."""
    layers = [
        LayerSummary(
            index=i,
            kind=spec.kind,
            shape=list(spec.weight_shape) if spec.is_weighted else ([spec.channels] if spec.channels else None),
            params=spec.param_count,
        )
        for i, spec in enumerate(model.layers)
    ]
    params = model.params.astype(np.float64)
    scores = None
    if task is not None:
        secret_data = make_dataset(task)
        stego_data = make_dataset(stego_task) if stego_task is not None else secret_data
        scores = score_filters(
            model, FilterSelection.full(model), secret_data, stego_data, lambda_g,
            batches or get_settings().grad_batches, pin_output=False,
        ).to_report()
    return InspectResult(
        layers=layers,
        num_params=model.num_params,
        mean=float(params.mean()),
        std=float(params.std()),
        min=float(params.min()),
        max=float(params.max()),
        scores=scores,
    )
