"""
Histogram features over a model's parameters.
"""
from typing import Optional, Union

import numpy as np

from app.errors import ShapeMismatchError
from app.models.graph import ModelGraph

DEFAULT_BINS = 100
PLANTED_VALUE = 1e6


def histogram_feature(model: Union[ModelGraph, np.ndarray], bins: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-width bins over [min, max] of this model's parameters, L1-normalized.

    A constant parameter vector puts all mass in the first bin.
    """
    params = model.params if isinstance(model, ModelGraph) else np.asarray(model).reshape(-1)
    if params.size == 0:
        raise ShapeMismatchError("histogram_feature needs at least one parameter")
    values = params.astype(np.float64)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        feature = np.zeros(bins)
        feature[0] = 1.0
        return feature
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    return counts / values.size


def plant_signal(model: ModelGraph, rng: np.random.Generator, value: float = PLANTED_VALUE,
                 index: Optional[int] = None) -> ModelGraph:
    """Copy of `model` with one parameter overwritten by `value`."""
    out = model.copy()
    position = int(rng.integers(0, out.num_params)) if index is None else index
    out.params[position] = value
    return out
