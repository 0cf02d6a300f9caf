"""
Filter selections, the partial-optimization mask, and secret sub-network
extraction.

Θ^S is pinned to selected-to-selected wiring: for weighted layer l, the
weights W^l[i, j] with i in S_l and j in S_{l-1} (S_0 = all input channels),
the biases of S_l, and gamma/beta of batchnorm channels fed by S_l.
"""
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from app.errors import SelectionError, ShapeMismatchError
from app.models.adaptation import AdaptationMeta, adaptation_added_mask, secret_layers, secret_output_layer
from app.models.graph import BatchNormStats, LayerSpec, ModelGraph


@dataclass(frozen=True)
class FilterSelection:
    """Selected filter indices S_l per weighted layer (graph layer index)."""

    layers: Mapping[int, FrozenSet[int]]

    def __post_init__(self):
        object.__setattr__(
            self, "layers", {int(k): frozenset(int(i) for i in v) for k, v in sorted(self.layers.items())}
        )

    @classmethod
    def full(cls, graph: ModelGraph, meta: Optional[AdaptationMeta] = None) -> "FilterSelection":
        """Every filter of the secret network (output layer limited to O_e under adaptation)."""
        meta = meta or AdaptationMeta.none(graph.output_dim)
        out = secret_output_layer(graph, meta)
        layers = {}
        for i in secret_layers(graph, meta):
            width = meta.original_output_dim if i == out else graph.layers[i].out_units
            layers[i] = frozenset(range(width))
        return cls(layers)

    def get(self, layer: int) -> FrozenSet[int]:
        return self.layers.get(layer, frozenset())

    def sizes(self) -> Dict[int, int]:
        return {layer: len(s) for layer, s in self.layers.items()}

    @property
    def total(self) -> int:
        return sum(len(s) for s in self.layers.values())

    def issubset(self, other: "FilterSelection") -> bool:
        return all(s <= other.get(layer) for layer, s in self.layers.items())

    def restrict(self, layers: Iterable[int]) -> "FilterSelection":
        keep = set(layers)
        return FilterSelection({k: v for k, v in self.layers.items() if k in keep})

    def merged(self, other: "FilterSelection") -> "FilterSelection":
        layers = dict(self.layers)
        layers.update(other.layers)
        return FilterSelection(layers)

    def validate(self, graph: ModelGraph, meta: Optional[AdaptationMeta] = None):
        meta = meta or AdaptationMeta.none(graph.output_dim)
        secret = set(secret_layers(graph, meta))
        for layer, s in self.layers.items():
            if layer not in secret:
                if s:
                    raise SelectionError(f"layer {layer} is not a secret-network layer but has selected filters")
                continue
            width = graph.layers[layer].out_units
            if any(i < 0 or i >= width for i in s):
                raise SelectionError(f"layer {layer}: filter index out of range [0, {width})")
        for layer in secret:
            if not self.get(layer):
                raise SelectionError(f"layer {layer}: empty selection severs the secret chain")

    def membership_bits(self, graph: ModelGraph) -> List[np.ndarray]:
        """One bitstream per weighted layer, bit i = 0 iff filter i is selected."""
        streams = []
        for layer in graph.weighted_layers():
            bits = np.ones(graph.layers[layer].out_units, dtype=np.uint8)
            selected = sorted(self.get(layer))
            bits[selected] = 0
            streams.append(bits)
        return streams

    @classmethod
    def from_membership_bits(cls, graph: ModelGraph, streams: List[np.ndarray]) -> "FilterSelection":
        weighted = graph.weighted_layers()
        if len(streams) != len(weighted):
            raise SelectionError(f"{len(streams)} bitstreams for {len(weighted)} weighted layers")
        layers = {}
        for layer, bits in zip(weighted, streams):
            if bits.size != graph.layers[layer].out_units:
                raise SelectionError(f"layer {layer}: bitstream has {bits.size} bits, layer has "
                                     f"{graph.layers[layer].out_units} filters")
            selected = np.flatnonzero(bits == 0)
            if selected.size:
                layers[layer] = frozenset(int(i) for i in selected)
        return cls(layers)

    def to_dict(self) -> Dict[str, List[int]]:
        return {str(layer): sorted(s) for layer, s in self.layers.items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Iterable[int]]) -> "FilterSelection":
        return cls({int(k): frozenset(v) for k, v in data.items()})


@dataclass(frozen=True)
class ParameterMask:
    """Binary vector aligned to the flat params: 0 marks Θ^S (frozen)."""

    values: np.ndarray

    @property
    def frozen(self) -> np.ndarray:
        return self.values == 0

    @property
    def frozen_count(self) -> int:
        return int(np.count_nonzero(self.values == 0))

    def __len__(self) -> int:
        return int(self.values.size)


def _chain(graph: ModelGraph, sel: FilterSelection, meta: AdaptationMeta) -> Iterator[Tuple[int, LayerSpec, np.ndarray, np.ndarray]]:
    """Walk the secret chain yielding (layer, spec, rows, cols) index arrays."""
    prev = np.arange(graph.input_channels, dtype=np.intp)
    last = secret_output_layer(graph, meta)
    for i in range(last + 1):
        spec = graph.layers[i]
        if spec.is_weighted:
            rows = np.array(sorted(sel.get(i)), dtype=np.intp)
            yield i, spec, rows, prev
            prev = rows
        else:
            yield i, spec, prev, prev


def selection_to_mask(graph: ModelGraph, sel: FilterSelection, adapt: Optional[AdaptationMeta] = None) -> ParameterMask:
    adapt = adapt or AdaptationMeta.none(graph.output_dim)
    sel.validate(graph, adapt)
    values = np.ones(graph.num_params, dtype=np.uint8)
    for i, spec, rows, cols in _chain(graph, sel, adapt):
        if spec.is_weighted:
            graph.view(i, "weight", values)[np.ix_(rows, cols)] = 0
            graph.view(i, "bias", values)[rows] = 0
        elif spec.kind == "batchnorm":
            graph.view(i, "gamma", values)[rows] = 0
            graph.view(i, "beta", values)[rows] = 0
    values[adaptation_added_mask(graph, adapt)] = 1
    return ParameterMask(values)


def extract_subnetwork(
    graph: ModelGraph,
    sel: FilterSelection,
    bn_stats: BatchNormStats,
    adapt: Optional[AdaptationMeta] = None,
) -> ModelGraph:
    """Prune `graph` down to the secret network; copied values are bit-identical."""
    adapt = adapt or AdaptationMeta.none(graph.output_dim)
    sel.validate(graph, adapt)
    if not bn_stats.covers(graph):
        raise ShapeMismatchError("batchnorm statistics do not cover every batchnorm channel of the graph")

    chain = list(_chain(graph, sel, adapt))
    layers = []
    for i, spec, rows, cols in chain:
        if spec.kind == "conv2d":
            layers.append(LayerSpec.conv(len(rows), len(cols), spec.kernel, spec.stride, spec.padding))
        elif spec.kind == "dense":
            layers.append(LayerSpec.dense(len(rows), len(cols)))
        elif spec.kind == "batchnorm":
            layers.append(LayerSpec.batchnorm(len(rows)))
        else:
            layers.append(spec)

    try:
        sub = ModelGraph(layers)
    except ShapeMismatchError as e:
        raise ShapeMismatchError(f"pruned network is inconsistent: {e}")

    for i, spec, rows, cols in chain:
        if spec.is_weighted:
            sub.view(i, "weight")[...] = graph.view(i, "weight")[np.ix_(rows, cols)]
            sub.view(i, "bias")[...] = graph.view(i, "bias")[rows]
        elif spec.kind == "batchnorm":
            sub.view(i, "gamma")[...] = graph.view(i, "gamma")[rows]
            sub.view(i, "beta")[...] = graph.view(i, "beta")[rows]
            sub.view(i, "running_mean")[...] = bn_stats.mean(i)[rows]
            sub.view(i, "running_var")[...] = bn_stats.var(i)[rows]
    return sub


def embed_subnetwork(
    graph: ModelGraph,
    sub: ModelGraph,
    sel: FilterSelection,
    adapt: Optional[AdaptationMeta] = None,
) -> ModelGraph:
    """Write a (tuned) sub-network's values back at their indices in a copy of `graph`."""
    adapt = adapt or AdaptationMeta.none(graph.output_dim)
    sel.validate(graph, adapt)
    out = graph.copy()
    for i, spec, rows, cols in _chain(graph, sel, adapt):
        if spec.is_weighted:
            target = out.view(i, "weight")
            if sub.view(i, "weight").shape != (len(rows), len(cols)) + target.shape[2:]:
                raise ShapeMismatchError(f"layer {i}: sub-network weight does not match the selection")
            target[np.ix_(rows, cols)] = sub.view(i, "weight")
            out.view(i, "bias")[rows] = sub.view(i, "bias")
        elif spec.kind == "batchnorm":
            out.view(i, "gamma")[rows] = sub.view(i, "gamma")
            out.view(i, "beta")[rows] = sub.view(i, "beta")
    return out


def scatter_bn_stats(graph: ModelGraph, sub: ModelGraph, sel: FilterSelection,
                     adapt: Optional[AdaptationMeta] = None) -> BatchNormStats:
    """Full-width statistics from a sub-network's; unselected channels get mean 0, var 1."""
    adapt = adapt or AdaptationMeta.none(graph.output_dim)
    stats = {}
    for i, spec, rows, _ in _chain(graph, sel, adapt):
        if spec.kind != "batchnorm":
            continue
        mean = np.zeros(spec.channels, dtype=np.float32)
        var = np.ones(spec.channels, dtype=np.float32)
        mean[rows] = sub.view(i, "running_mean")
        var[rows] = sub.view(i, "running_var")
        stats[i] = (mean, var)
    for i in graph.bn_layers():
        if i not in stats:
            c = graph.layers[i].channels
            stats[i] = (np.zeros(c, dtype=np.float32), np.ones(c, dtype=np.float32))
    return BatchNormStats(stats)
