"""
Output-layer adaptation of the secret model to the stego task's output width.
"""
import math
from typing import Optional, Tuple

import numpy as np

from app.engine.optim import kaiming_normal
from app.errors import ShapeMismatchError
from app.log import log_info
from app.models.adaptation import AdaptationMeta, AdaptationMode
from app.models.graph import LayerSpec, ModelGraph

__all__ = ["AdaptationMeta", "AdaptationMode", "adapt_output_layer", "default_added_neurons", "added_param_count"]


def default_added_neurons(original_output_dim: int) -> int:
    return max(0, math.ceil(original_output_dim / 4))


def _widened(spec: LayerSpec, width: int) -> LayerSpec:
    return LayerSpec.dense(width, spec.in_width)


def adapt_output_layer(
    secret: ModelGraph,
    stego_output_dim: int,
    rng: np.random.Generator,
    added_neurons: Optional[int] = None,
) -> Tuple[ModelGraph, AdaptationMeta]:
    """Reshape `secret` so it produces `stego_output_dim` outputs.

    O_e < O_t widens the dense output layer; O_e > O_t widens it by
    `added_neurons` and appends relu + a dense O_t layer. Original values keep
    their indices, added weights are Kaiming-initialized with zero biases.
    """
    if stego_output_dim < 1:
        raise ShapeMismatchError(f"stego output dim must be positive, got {stego_output_dim}")
    o_e, o_t = secret.output_dim, stego_output_dim
    if o_e == o_t:
        return secret.copy(), AdaptationMeta.none(o_e)

    out = secret.weighted_layers()[-1]
    spec = secret.layers[out]
    if spec.kind != "dense" or out != len(secret.layers) - 1:
        raise ShapeMismatchError("output adaptation needs a model ending in a dense output layer")

    if o_e < o_t:
        layers = list(secret.layers[:out]) + [_widened(spec, o_t)]
        meta = AdaptationMeta(AdaptationMode.UPSAMPLE, o_e, o_t)
    else:
        added = default_added_neurons(o_e) if added_neurons is None else added_neurons
        hidden = o_e + added
        layers = list(secret.layers[:out]) + [_widened(spec, hidden), LayerSpec.relu(), LayerSpec.dense(o_t, hidden)]
        meta = AdaptationMeta(AdaptationMode.HIDDEN_EXTEND, o_e, o_t, added_neurons=added, appended_layer=True)

    graph = ModelGraph(layers)
    for slot in secret.slots:
        if slot.layer != out:
            graph.view(slot.layer, slot.role)[...] = secret.view(slot.layer, slot.role)

    width = graph.layers[out].out_units
    weight = graph.view(out, "weight")
    weight[:o_e] = secret.view(out, "weight")
    weight[o_e:] = kaiming_normal((width - o_e, spec.in_width), rng, fan=spec.in_width)
    graph.view(out, "bias")[:o_e] = secret.view(out, "bias")

    if meta.appended_layer:
        tail = len(layers) - 1
        graph.view(tail, "weight")[...] = kaiming_normal(graph.layers[tail].weight_shape, rng)

    log_info(f"adapted output layer: {meta.mode.value}, O_e={o_e}, O_t={o_t}, "
             f"{graph.num_params - secret.num_params} added params")
    return graph, meta


def added_param_count(secret_in_width: int, meta: AdaptationMeta) -> int:
    """Closed-form number of parameters adaptation adds."""
    if meta.mode == AdaptationMode.NONE:
        return 0
    if meta.mode == AdaptationMode.UPSAMPLE:
        return (meta.stego_output_dim - meta.original_output_dim) * (secret_in_width + 1)
    hidden = meta.original_output_dim + meta.added_neurons
    return meta.added_neurons * (secret_in_width + 1) + meta.stego_output_dim * (hidden + 1)
