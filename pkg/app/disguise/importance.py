"""
Dual-task gradient importance of filters and global top-P selection.

For filter i of weighted layer l, g(L, W, data) is the mean of |dL/dW| over a
weight slice averaged over minibatches. GoE sums the own-filter slice
W^l[i] and the consuming channel slice W^{l+1}[:, i] on the secret task
(measured on the secret sub-network); GoT does the same on the stego task
(measured on the full stego model). alpha = GoE - lambda_g * GoT.
"""
from dataclasses import dataclass
from typing import Dict, Iterable, List, Literal, Optional

import numpy as np
import pandas as pd

from app.engine import ops
from app.engine.tensor import AutodiffTape, Tensor
from app.errors import SelectionError
from app.log import log_debug
from app.models.adaptation import AdaptationMeta, secret_output_layer
from app.models.graph import ModelGraph
from app.models.network import Network
from app.models.schemas import FilterScoreRow, ScoreReport
from app.models.selection import FilterSelection, extract_subnetwork
from app.tasks.datasets import TaskData

GRAD_BATCH_SIZE = 32


@dataclass(frozen=True)
class WeightSlice:
    """Filter `index` (axis 0) or input channel `index` (axis 1) of a layer's weight."""

    layer: int
    axis: Literal["filter", "channel"]
    index: int

    def flat_indices(self, graph: ModelGraph) -> np.ndarray:
        positions = graph.view(self.layer, "weight", np.arange(graph.num_params))
        part = positions[self.index] if self.axis == "filter" else positions[:, self.index]
        if part.size == 0:
            raise SelectionError(f"empty weight slice {self}")
        return part.reshape(-1)


def abs_grad_mean(model: ModelGraph, loss_kind: str, data: TaskData, batches: int,
                  batch_size: int = GRAD_BATCH_SIZE) -> np.ndarray:
    """|dL/dtheta| for every flat parameter, averaged over the first `batches` minibatches.

    Batchnorm runs on batch statistics without touching its running buffers.
    """
    net = Network(model, requires_grad=True)
    total = np.zeros(model.num_params, dtype=np.float64)
    used = 0
    for x, y in data.train.batches(batch_size):
        if used == batches:
            break
        net.zero_grad()
        with AutodiffTape() as tape:
            out = net(x, training=True, update_stats=False)
            loss = ops.loss(loss_kind, out, Tensor(y))
        tape.backward(loss)
        total += np.abs(net.grad)
        used += 1
    return total / max(used, 1)


def grad_magnitude(model: ModelGraph, loss_kind: str, data: TaskData, w_slice: WeightSlice,
                   batches: int, batch_size: int = GRAD_BATCH_SIZE) -> float:
    grads = abs_grad_mean(model, loss_kind, data, batches, batch_size)
    return float(grads[w_slice.flat_indices(model)].mean())


@dataclass(frozen=True)
class FilterScore:
    layer: int
    filter: int
    goe: float
    got: float
    alpha: float


@dataclass(frozen=True)
class ImportanceScore:
    lambda_g: float
    batches: int
    scores: List[FilterScore]

    @property
    def layers(self) -> List[int]:
        return sorted({s.layer for s in self.scores})

    def alphas(self) -> Dict[int, np.ndarray]:
        out: Dict[int, List[float]] = {}
        for s in sorted(self.scores, key=lambda s: (s.layer, s.filter)):
            out.setdefault(s.layer, []).append(s.alpha)
        return {layer: np.array(values) for layer, values in out.items()}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(s.layer, s.filter, s.goe, s.got, s.alpha) for s in self.scores],
            columns=["layer", "filter", "goe", "got", "alpha"],
        )

    def to_report(self) -> ScoreReport:
        return ScoreReport(
            lambda_g=self.lambda_g,
            batches=self.batches,
            scores=[FilterScoreRow(layer=s.layer, filter=s.filter, goe=s.goe, got=s.got, alpha=s.alpha)
                    for s in self.scores],
        )


def _filter_terms(graph: ModelGraph, grads: np.ndarray, layer: int, position: int) -> float:
    """Own-filter term plus the next weighted layer's channel term (0 for the last layer)."""
    term = float(grads[WeightSlice(layer, "filter", position).flat_indices(graph)].mean())
    nxt = graph.next_weighted(layer)
    if nxt is not None:
        term += float(grads[WeightSlice(nxt, "channel", position).flat_indices(graph)].mean())
    return term


def score_filters(
    model: ModelGraph,
    candidate: FilterSelection,
    secret_data: TaskData,
    stego_data: TaskData,
    lambda_g: float,
    batches: int,
    *,
    secret_model: Optional[ModelGraph] = None,
    adapt: Optional[AdaptationMeta] = None,
    pin_output: bool = True,
) -> ImportanceScore:
    """Score every candidate filter; the secret output layer is skipped when pinned.

    `model` is the current stego model; `secret_model` is the current secret
    sub-network for `candidate` and defaults to the one extracted from `model`.
    """
    if lambda_g < 0:
        raise SelectionError(f"lambda_g must be non-negative, got {lambda_g}")
    adapt = adapt or AdaptationMeta.none(model.output_dim)
    candidate.validate(model, adapt)
    if secret_model is None:
        secret_model = extract_subnetwork(model, candidate, model.running_stats(), adapt)
    out_layer = secret_output_layer(model, adapt)

    goe_grads = abs_grad_mean(secret_model, secret_data.spec.loss_kind, secret_data, batches)
    got_grads = abs_grad_mean(model, stego_data.spec.loss_kind, stego_data, batches)

    scores = []
    for layer, selected in candidate.layers.items():
        if pin_output and layer == out_layer:
            continue
        for position, i in enumerate(sorted(selected)):
            goe = _filter_terms(secret_model, goe_grads, layer, position)
            got = _filter_terms(model, got_grads, layer, i)
            scores.append(FilterScore(layer, i, goe, got, goe - lambda_g * got))
    log_debug(f"scored {len(scores)} filters over {len(candidate.layers)} layers")
    return ImportanceScore(lambda_g=lambda_g, batches=batches, scores=scores)


def select_top(scores: ImportanceScore, count: int) -> FilterSelection:
    """Top `count` filters by alpha across layers, at least one per layer.

    Ties go to the lower layer index, then the lower filter index.
    """
    layers = scores.layers
    if count < len(layers):
        raise SelectionError(f"cannot keep {count} filters with a floor of one in each of {len(layers)} layers")
    if count > len(scores.scores):
        raise SelectionError(f"cannot select {count} of {len(scores.scores)} scored filters")

    ranked = sorted(scores.scores, key=lambda s: (-s.alpha, s.layer, s.filter))
    chosen = {}
    for s in ranked:
        if s.layer not in chosen:
            chosen[s.layer] = {s.filter}
    taken = len(layers)
    for s in ranked:
        if taken == count:
            break
        if s.filter not in chosen[s.layer]:
            chosen[s.layer].add(s.filter)
            taken += 1
    return FilterSelection(chosen)


def merge_pinned(selection: FilterSelection, pinned: FilterSelection, layers: Iterable[int]) -> FilterSelection:
    """Add the unscored (pinned) layers of `pinned` back into `selection`."""
    return selection.merged(pinned.restrict(layers))
