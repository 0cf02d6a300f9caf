"""
JSON configs and JSON outputs, all validated by pydantic.
"""
import json
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.errors import ConfigError
from app.models.graph import LayerSpec

TaskKind = Literal["classification", "denoising", "bit_decoding"]
Pattern = Literal["blobs", "spirals", "textures"]
MetricKind = Literal["acc", "psnr", "ber"]

_LOSS_BY_TASK = {"classification": "softmax_crossentropy", "denoising": "mse", "bit_decoding": "sigmoid_bce"}
_METRIC_BY_TASK = {"classification": "acc", "denoising": "psnr", "bit_decoding": "ber"}
HIGHER_IS_BETTER = {"acc": True, "psnr": True, "ber": False}
# secret-threshold defaults per metric when a config leaves tau_se unset
DEFAULT_TAU_SE = {"ber": 0.0001, "acc": 0.01, "psnr": 0.5}

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- experiment configs ----------------------------------------------------

class TaskSpec(_Config):
    name: str = ""
    kind: TaskKind
    pattern: Pattern = "blobs"
    seed: int = 0
    channels: int = Field(default=1, ge=1)
    height: int = Field(default=16, ge=2)
    width: int = Field(default=16, ge=2)
    classes: int = Field(default=4, ge=2)
    message_bits: int = Field(default=16, ge=1)
    noise_sigma: float = Field(default=0.1, ge=0.0)
    train_size: int = Field(default=512, ge=1)
    test_size: int = Field(default=256, ge=1)
    data_file: Optional[str] = None

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def output_dim(self) -> int:
        if self.kind == "classification":
            return self.classes
        if self.kind == "bit_decoding":
            return self.message_bits
        return self.channels

    @property
    def loss_kind(self) -> str:
        return _LOSS_BY_TASK[self.kind]

    @property
    def metric(self) -> str:
        return _METRIC_BY_TASK[self.kind]

    @property
    def higher_is_better(self) -> bool:
        return HIGHER_IS_BETTER[self.metric]


class ArchSpec(_Config):
    name: str = ""
    layers: List[LayerSpec]

    @field_validator("layers")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("an architecture needs at least one layer")
        return v

    def with_output(self, dim: int) -> "ArchSpec":
        """Same architecture with the last weighted layer resized to `dim` outputs."""
        layers = list(self.layers)
        last = max(i for i, spec in enumerate(layers) if spec.is_weighted)
        spec = layers[last]
        if spec.kind == "dense":
            layers[last] = LayerSpec.dense(dim, spec.in_width)
        else:
            layers[last] = LayerSpec.conv(dim, spec.in_channels, spec.kernel, spec.stride, spec.padding)
        return ArchSpec(name=self.name, layers=layers)


class TrainConfig(_Config):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.001, gt=0.0)
    seed: int = 0


class DisguiseConfig(_Config):
    lambda_g: float = Field(default=0.01, ge=0.0)
    lambda_e: float = Field(default=0.001, gt=0.0)
    lambda_t: float = Field(default=0.001, gt=0.0)
    lambda_p: float = 0.9
    tau_se: Optional[float] = Field(default=None, ge=0.0)
    tau_st: float = Field(default=0.01, ge=0.0)
    epochs_secret: int = Field(default=5, ge=1)
    epochs_stego: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    grad_batches: Optional[int] = Field(default=None, ge=1)
    added_neurons: Optional[int] = Field(default=None, ge=0)
    max_iterations: Optional[int] = Field(default=None, ge=1)
    seed: int = 0

    @field_validator("lambda_p")
    @classmethod
    def _decay(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f"lambda_p must lie in (0, 1), got {v}")
        return v

    def secret_threshold(self, metric: str) -> float:
        return DEFAULT_TAU_SE[metric] if self.tau_se is None else self.tau_se


class TaskPair(_Config):
    secret: TaskSpec
    stego: TaskSpec


class PoolConfig(_Config):
    task_pairs: List[TaskPair] = Field(min_length=1)
    architectures: List[ArchSpec] = Field(min_length=1)
    seeds: List[int] = Field(min_length=1)
    key: int = Field(default=0, ge=0, lt=2 ** 64)
    train: TrainConfig = TrainConfig()
    disguise: DisguiseConfig = DisguiseConfig()
    detectors: List[Literal["linear", "mlp"]] = ["linear", "mlp"]
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    detector_epochs: int = Field(default=200, ge=1)
    detector_lr: float = Field(default=0.01, gt=0.0)
    bins: int = Field(default=100, ge=2)
    split_seed: int = 0
    workers: Optional[int] = Field(default=None, ge=1)


# --- reports ---------------------------------------------------------------

class IterationRecord(_Config):
    t: int
    p: int
    alpha_se: float
    alpha_st: float
    secret_metric: float
    stego_metric: float
    sizes: Dict[str, int]
    kept: Dict[str, List[int]] = {}
    outcome: Literal["continue", "break-success", "rollback", "limit"]


class DisguiseReport(_Config):
    secret_metric: MetricKind
    stego_metric: MetricKind
    secret_baseline: float
    stego_baseline: float
    tau_se: float
    tau_st: float
    lambda_p: float
    total_filters: int
    iterations: List[IterationRecord] = []
    final_iteration: Optional[int] = None
    adaptation: Dict[str, Union[str, int, bool]] = {}
    expansion_rate: Optional[float] = None

    def final_record(self) -> Optional[IterationRecord]:
        for record in self.iterations:
            if record.t == self.final_iteration:
                return record
        return None


class FilterScoreRow(_Config):
    layer: int
    filter: int
    goe: float
    got: float
    alpha: float


class ScoreReport(_Config):
    lambda_g: float
    batches: int
    scores: List[FilterScoreRow]


class DetectorResult(_Config):
    detector: Literal["linear", "mlp"]
    pool: Literal["protocol", "sanity"] = "protocol"
    accuracy: float
    p_e: float
    false_alarm: float
    missed_detection: float
    train_pairs: int
    test_pairs: int


class PoolMember(_Config):
    pair: int
    arch: int
    seed: int
    label: Literal["cover", "stego"]
    ok: bool
    error: Optional[str] = None
    params: Optional[int] = None


class DetectionReport(_Config):
    members: List[PoolMember]
    failed_cells: int
    results: List[DetectorResult]


class EvaluateResult(_Config):
    task: TaskKind
    metric: MetricKind
    value: float


class CapacityResult(_Config):
    secret_params: int
    stego_params: int
    expansion_rate: float


class LayerSummary(_Config):
    index: int
    kind: str
    shape: Optional[List[int]] = None
    params: int


class InspectResult(_Config):
    layers: List[LayerSummary]
    num_params: int
    mean: float
    std: float
    min: float
    max: float
    scores: Optional[ScoreReport] = None


class ErrorObject(_Config):
    error: str
    message: str


OUTPUT_SCHEMAS: Dict[str, Type[BaseModel]] = {
    "disguise_report": DisguiseReport,
    "score_report": ScoreReport,
    "detection_report": DetectionReport,
    "evaluate_result": EvaluateResult,
    "capacity_result": CapacityResult,
    "inspect_result": InspectResult,
    "error_object": ErrorObject,
}

CONFIG_SCHEMAS: Dict[str, Type[BaseModel]] = {
    "task_spec": TaskSpec,
    "arch_spec": ArchSpec,
    "train_config": TrainConfig,
    "disguise_config": DisguiseConfig,
    "pool_config": PoolConfig,
}


def load_config(path: Union[str, Path], model: Type[ConfigT]) -> ConfigT:
    """Read and validate a JSON config; any failure is a ConfigError."""
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    try:
        return model.model_validate(json.loads(raw))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON: {e}")
    except ValidationError as e:
        raise ConfigError(f"{path}: {model.__name__} validation failed: {e}")


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def dump_json(model: BaseModel, indent: Optional[int] = 2) -> str:
    """Stable JSON text for output artifacts; non-finite floats become "inf"/"nan" strings."""
    return json.dumps(_jsonable(model.model_dump()), sort_keys=True, indent=indent, allow_nan=False)
