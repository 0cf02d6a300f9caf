"""
Output-layer adaptation metadata and the parameter positions it adds.
"""
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Tuple

import numpy as np

from app.errors import ShapeMismatchError
from app.models.graph import ModelGraph


class AdaptationMode(str, Enum):
    NONE = "none"
    UPSAMPLE = "upsample"
    HIDDEN_EXTEND = "hidden_extend"

    @property
    def code(self) -> int:
        return {"none": 0, "upsample": 1, "hidden_extend": 2}[self.value]

    @classmethod
    def from_code(cls, code: int) -> "AdaptationMode":
        for mode in cls:
            if mode.code == code:
                return mode
        raise ValueError(f"unknown adaptation mode code {code}")


@dataclass(frozen=True)
class AdaptationMeta:
    mode: AdaptationMode
    original_output_dim: int
    stego_output_dim: int
    added_neurons: int = 0
    appended_layer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", AdaptationMode(self.mode))
        o_e, o_t = self.original_output_dim, self.stego_output_dim
        if o_e < 1 or o_t < 1:
            raise ShapeMismatchError(f"output dims must be positive, got O_e={o_e}, O_t={o_t}")
        expected = (
            AdaptationMode.UPSAMPLE if o_e < o_t
            else AdaptationMode.HIDDEN_EXTEND if o_e > o_t
            else AdaptationMode.NONE
        )
        if self.mode != expected:
            raise ShapeMismatchError(f"mode {self.mode.value} inconsistent with O_e={o_e}, O_t={o_t}")
        if self.appended_layer != (self.mode == AdaptationMode.HIDDEN_EXTEND):
            raise ShapeMismatchError("an appended final layer exists exactly in hidden_extend mode")
        if self.added_neurons < 0 or (self.mode != AdaptationMode.HIDDEN_EXTEND and self.added_neurons):
            raise ShapeMismatchError("added_neurons only applies to hidden_extend mode")

    @classmethod
    def none(cls, output_dim: int) -> "AdaptationMeta":
        return cls(AdaptationMode.NONE, output_dim, output_dim)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data


def secret_output_layer(graph: ModelGraph, meta: AdaptationMeta) -> int:
    """Graph index of the layer that produces the secret model's outputs."""
    weighted = graph.weighted_layers()
    if meta.appended_layer:
        if len(weighted) < 2:
            raise ShapeMismatchError("hidden_extend graph needs an appended layer after the secret output layer")
        return weighted[-2]
    return weighted[-1]


def secret_layers(graph: ModelGraph, meta: AdaptationMeta) -> Tuple[int, ...]:
    """Weighted layers that belong to the secret network."""
    last = secret_output_layer(graph, meta)
    return tuple(i for i in graph.weighted_layers() if i <= last)


def adaptation_added_mask(graph: ModelGraph, meta: AdaptationMeta) -> np.ndarray:
    """True at every parameter that adaptation added to the secret model."""
    added = np.zeros(graph.num_params, dtype=bool)
    if meta.mode == AdaptationMode.NONE:
        return added
    out = secret_output_layer(graph, meta)
    o_e = meta.original_output_dim
    graph.view(out, "weight", added)[o_e:] = True
    graph.view(out, "bias", added)[o_e:] = True
    if meta.appended_layer:
        for j in range(out + 1, len(graph.layers)):
            for role, _ in graph.layers[j].param_roles():
                graph.view(j, role, added)[...] = True
    return added
