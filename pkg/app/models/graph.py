"""
Architecture description and the canonical flat parameter vector.

Flat order: layers in chain order; conv/dense weights [out][in][kh][kw]
row-major then biases; batchnorm gamma, beta, running_mean, running_var.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.engine.optim import kaiming_normal
from app.engine.tensor import DTYPE
from app.errors import ShapeMismatchError

LayerKind = Literal["conv2d", "dense", "batchnorm", "relu", "maxpool", "avgpool_global"]

WEIGHTED_KINDS = ("conv2d", "dense")
TRAINABLE_ROLES = ("weight", "bias", "gamma", "beta")
STAT_ROLES = ("running_mean", "running_var")


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: LayerKind
    # conv2d
    out_filters: Optional[int] = None
    in_channels: Optional[int] = None
    kernel: Optional[Tuple[int, int]] = None
    stride: int = 1
    padding: int = 0
    # dense
    out_width: Optional[int] = None
    in_width: Optional[int] = None
    # batchnorm
    channels: Optional[int] = None

    @model_validator(mode="after")
    def _check_kind_fields(self):
        required = {
            "conv2d": ("out_filters", "in_channels", "kernel"),
            "dense": ("out_width", "in_width"),
            "batchnorm": ("channels",),
        }.get(self.kind, ())
        for name in required:
            value = getattr(self, name)
            if value is None:
                raise ValueError(f"{self.kind} layer needs '{name}'")
        for name in ("out_filters", "in_channels", "out_width", "in_width", "channels"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{self.kind}.{name} must be positive, got {value}")
        if self.kernel is not None and min(self.kernel) < 1:
            raise ValueError(f"kernel must be positive, got {self.kernel}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        return self

    @classmethod
    def conv(cls, out_filters: int, in_channels: int, kernel=(3, 3), stride: int = 1, padding: int = 0) -> "LayerSpec":
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        return cls(kind="conv2d", out_filters=out_filters, in_channels=in_channels,
                   kernel=tuple(kernel), stride=stride, padding=padding)

    @classmethod
    def dense(cls, out_width: int, in_width: int) -> "LayerSpec":
        return cls(kind="dense", out_width=out_width, in_width=in_width)

    @classmethod
    def batchnorm(cls, channels: int) -> "LayerSpec":
        return cls(kind="batchnorm", channels=channels)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(kind="relu")

    @classmethod
    def maxpool(cls) -> "LayerSpec":
        return cls(kind="maxpool")

    @classmethod
    def avgpool_global(cls) -> "LayerSpec":
        return cls(kind="avgpool_global")

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def out_units(self) -> Optional[int]:
        """Filters of a conv, neurons of a dense layer (FC-as-conv view)."""
        return {"conv2d": self.out_filters, "dense": self.out_width}.get(self.kind)

    @property
    def in_units(self) -> Optional[int]:
        return {"conv2d": self.in_channels, "dense": self.in_width}.get(self.kind)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_filters, self.in_channels, self.kernel[0], self.kernel[1])
        if self.kind == "dense":
            return (self.out_width, self.in_width)
        raise ShapeMismatchError(f"{self.kind} layer has no weight")

    @property
    def filter_shape(self) -> Tuple[int, int, int]:
        """Shape of one filter, dense neurons seen as c x 1 x 1."""
        if self.kind == "conv2d":
            return (self.in_channels, self.kernel[0], self.kernel[1])
        return (self.in_width, 1, 1)

    def param_roles(self) -> List[Tuple[str, Tuple[int, ...]]]:
        if self.is_weighted:
            return [("weight", self.weight_shape), ("bias", (self.out_units,))]
        if self.kind == "batchnorm":
            c = (self.channels,)
            return [("gamma", c), ("beta", c), ("running_mean", c), ("running_var", c)]
        return []

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_roles())


@dataclass(frozen=True)
class ParamSlot:
    layer: int
    role: str
    start: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class BatchNormStats:
    """Full-width running mean/var per batchnorm layer index."""

    layers: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def mean(self, layer: int) -> np.ndarray:
        return self.layers[layer][0]

    def var(self, layer: int) -> np.ndarray:
        return self.layers[layer][1]

    @property
    def total_channels(self) -> int:
        return sum(int(m.size) for m, _ in self.layers.values())

    def covers(self, graph: "ModelGraph") -> bool:
        for i in graph.bn_layers():
            if i not in self.layers:
                return False
            mean, var = self.layers[i]
            if mean.shape != (graph.layers[i].channels,) or var.shape != mean.shape:
                return False
        return True

    def equals(self, other: "BatchNormStats") -> bool:
        if sorted(self.layers) != sorted(other.layers):
            return False
        return all(
            np.array_equal(self.layers[i][0].view(np.uint32), other.layers[i][0].view(np.uint32))
            and np.array_equal(self.layers[i][1].view(np.uint32), other.layers[i][1].view(np.uint32))
            for i in self.layers
        )


def validate_chain(layers: Sequence[LayerSpec]):
    if not layers:
        raise ShapeMismatchError("a model needs at least one layer")
    first = layers[0]
    if first.kind == "conv2d":
        channels, spatial = first.in_channels, True
    elif first.kind == "dense":
        channels, spatial = first.in_width, False
    elif first.kind == "batchnorm":
        channels, spatial = first.channels, True
    else:
        raise ShapeMismatchError(f"first layer must be conv2d, dense or batchnorm, got {first.kind}")

    for i, spec in enumerate(layers):
        if spec.kind == "conv2d":
            if not spatial:
                raise ShapeMismatchError(f"layer {i}: conv2d after the spatial dimensions were pooled away")
            if spec.in_channels != channels:
                raise ShapeMismatchError(f"layer {i}: conv2d expects {spec.in_channels} channels, chain has {channels}")
            channels = spec.out_filters
        elif spec.kind == "dense":
            if spatial and i > 0:
                raise ShapeMismatchError(f"layer {i}: dense needs a 2-D input, add avgpool_global first")
            if spec.in_width != channels:
                raise ShapeMismatchError(f"layer {i}: dense expects width {spec.in_width}, chain has {channels}")
            channels, spatial = spec.out_width, False
        elif spec.kind == "batchnorm":
            if spec.channels != channels:
                raise ShapeMismatchError(f"layer {i}: batchnorm has {spec.channels} channels, chain has {channels}")
        elif spec.kind == "maxpool":
            if not spatial:
                raise ShapeMismatchError(f"layer {i}: maxpool needs a spatial input")
        elif spec.kind == "avgpool_global":
            if not spatial:
                raise ShapeMismatchError(f"layer {i}: avgpool_global needs a spatial input")
            spatial = False

    if not any(spec.is_weighted for spec in layers):
        raise ShapeMismatchError("a model needs at least one conv2d or dense layer")


class ModelGraph:
    """Ordered layer specs plus one flat float32 parameter vector."""

    def __init__(self, layers: Sequence[LayerSpec], params: Optional[np.ndarray] = None):
        self.layers: Tuple[LayerSpec, ...] = tuple(layers)
        validate_chain(self.layers)

        slots: List[ParamSlot] = []
        offset = 0
        for i, spec in enumerate(self.layers):
            for role, shape in spec.param_roles():
                slot = ParamSlot(layer=i, role=role, start=offset, shape=tuple(shape))
                slots.append(slot)
                offset += slot.size
        self._slots = slots
        self._by_key: Dict[Tuple[int, str], ParamSlot] = {(s.layer, s.role): s for s in slots}

        if params is None:
            params = np.zeros(offset, dtype=DTYPE)
        params = np.ascontiguousarray(params, dtype=DTYPE).reshape(-1)
        if params.size != offset:
            raise ShapeMismatchError(f"architecture needs {offset} parameters, got {params.size}")
        self.params = params

    # -- structure ----------------------------------------------------------

    @property
    def num_params(self) -> int:
        return int(self.params.size)

    @property
    def slots(self) -> Tuple[ParamSlot, ...]:
        return tuple(self._slots)

    def weighted_layers(self) -> Tuple[int, ...]:
        return tuple(i for i, spec in enumerate(self.layers) if spec.is_weighted)

    def bn_layers(self) -> Tuple[int, ...]:
        return tuple(i for i, spec in enumerate(self.layers) if spec.kind == "batchnorm")

    @property
    def input_channels(self) -> int:
        first = self.layers[0]
        return first.in_units if first.is_weighted else first.channels

    @property
    def spatial_input(self) -> bool:
        return self.layers[0].kind != "dense"

    @property
    def output_dim(self) -> int:
        return self.layers[self.weighted_layers()[-1]].out_units

    def next_weighted(self, layer: int) -> Optional[int]:
        for j in range(layer + 1, len(self.layers)):
            if self.layers[j].is_weighted:
                return j
        return None

    def total_filters(self, layers: Optional[Sequence[int]] = None) -> int:
        layers = self.weighted_layers() if layers is None else layers
        return sum(self.layers[i].out_units for i in layers)

    # -- parameter access ---------------------------------------------------

    def slot(self, layer: int, role: str) -> ParamSlot:
        try:
            return self._by_key[(layer, role)]
        except KeyError:
            raise ShapeMismatchError(f"layer {layer} ({self.layers[layer].kind}) has no '{role}' parameter")

    def view(self, layer: int, role: str, array: Optional[np.ndarray] = None) -> np.ndarray:
        """Shaped view of one parameter; `array` may be any vector aligned to params."""
        s = self.slot(layer, role)
        source = self.params if array is None else array
        if source.size != self.num_params:
            raise ShapeMismatchError(f"array of size {source.size} is not aligned to {self.num_params} params")
        return source[s.start:s.stop].reshape(s.shape)

    def index_of(self, layer: int, role: str, index: Sequence[int]) -> int:
        s = self.slot(layer, role)
        return s.start + int(np.ravel_multi_index(tuple(index), s.shape))

    def iter_index(self) -> Iterator[Tuple[Tuple[int, str, Tuple[int, ...]], int]]:
        for s in self._slots:
            for k, multi in enumerate(np.ndindex(*s.shape)):
                yield (s.layer, s.role, tuple(int(v) for v in multi)), s.start + k

    def param_index(self) -> Dict[Tuple[int, str, Tuple[int, ...]], int]:
        return dict(self.iter_index())

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_params, dtype=bool)
        for s in self._slots:
            if s.role in TRAINABLE_ROLES:
                mask[s.start:s.stop] = True
        return mask

    def running_stats(self) -> BatchNormStats:
        return BatchNormStats({
            i: (self.view(i, "running_mean").copy(), self.view(i, "running_var").copy())
            for i in self.bn_layers()
        })

    def set_running_stats(self, stats: BatchNormStats):
        for i in self.bn_layers():
            self.view(i, "running_mean")[...] = stats.mean(i)
            self.view(i, "running_var")[...] = stats.var(i)

    def copy(self) -> "ModelGraph":
        return ModelGraph(self.layers, self.params.copy())

    def bit_equal(self, other: "ModelGraph") -> bool:
        return self.layers == other.layers and np.array_equal(
            self.params.view(np.uint32), other.params.view(np.uint32)
        )

    def __repr__(self) -> str:
        kinds = ",".join(spec.kind for spec in self.layers)
        return f"ModelGraph(layers=[{kinds}], params={self.num_params})"


def init_graph(layers: Sequence[LayerSpec], rng: np.random.Generator) -> ModelGraph:
    """Kaiming weights, zero biases, identity batchnorm."""
    graph = ModelGraph(layers)
    for i, spec in enumerate(graph.layers):
        if spec.is_weighted:
            graph.view(i, "weight")[...] = kaiming_normal(spec.weight_shape, rng)
        elif spec.kind == "batchnorm":
            graph.view(i, "gamma")[...] = 1.0
            graph.view(i, "running_var")[...] = 1.0
    return graph
