"""
Learned cover/stego detectors on histogram features, trained with the
in-repo engine: a linear (logistic) detector and a 100-64-2 MLP.
"""
from dataclasses import dataclass
from typing import List, Literal, Tuple

import numpy as np

from app.errors import DetectorError
from app.models.graph import LayerSpec, init_graph
from app.models.network import predict
from app.tasks.datasets import Dataset
from app.tasks.training import fit

DetectorKind = Literal["linear", "mlp"]

MIN_TRAIN_PAIRS = 8
MLP_HIDDEN = 64
COVER, STEGO = 0, 1


@dataclass(frozen=True)
class DetectionResult:
    accuracy: float
    false_alarm: float
    missed_detection: float

    @property
    def p_e(self) -> float:
        """Average detection error: mean of false-alarm and missed-detection rates."""
        return 0.5 * (self.false_alarm + self.missed_detection)


def detector_layers(kind: DetectorKind, features: int) -> List[LayerSpec]:
    if kind == "linear":
        return [LayerSpec.dense(2, features)]
    if kind == "mlp":
        return [LayerSpec.dense(MLP_HIDDEN, features), LayerSpec.relu(), LayerSpec.dense(2, MLP_HIDDEN)]
    raise DetectorError(f"unknown detector kind {kind!r}")


def split_pairs(n_pairs: int, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Shuffle pair ids and cut them into train/test; a pair never straddles the cut."""
    order = np.random.default_rng(seed).permutation(n_pairs)
    cut = int(round(train_fraction * n_pairs))
    cut = min(max(cut, 1), n_pairs - 1) if n_pairs > 1 else n_pairs
    return np.sort(order[:cut]), np.sort(order[cut:])


def _standardize(train: np.ndarray, test: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0] = 1.0
    return ((train - mean) / std).astype(np.float32), ((test - mean) / std).astype(np.float32)


def train_detector(
    features: np.ndarray,
    labels: np.ndarray,
    kind: DetectorKind,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    *,
    epochs: int = 200,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
) -> DetectionResult:
    """Fit a detector on rows `train_idx` and score it on rows `test_idx`."""
    if len(features) != len(labels):
        raise DetectorError(f"{len(features)} feature rows for {len(labels)} labels")
    if len(train_idx) < 2 * MIN_TRAIN_PAIRS:
        raise DetectorError(f"need at least {MIN_TRAIN_PAIRS} training pairs, got {len(train_idx) / 2:g}")
    if len(test_idx) == 0:
        raise DetectorError("empty test split")
    y_train, y_test = labels[train_idx].astype(np.int64), labels[test_idx].astype(np.int64)
    if np.unique(y_train).size < 2 or np.unique(y_test).size < 2:
        raise DetectorError("degenerate split: train and test must both hold covers and stegos")

    x_train, x_test = _standardize(features[train_idx].astype(np.float64), features[test_idx].astype(np.float64))
    graph = init_graph(detector_layers(kind, features.shape[1]), np.random.default_rng(seed))
    fit(graph, Dataset(x_train, y_train), "softmax_crossentropy", epochs=epochs, lr=lr,
        batch_size=batch_size, seed=seed, tag=f"detector-{kind}")

    predicted = np.argmax(predict(graph, x_test), axis=1)
    covers, stegos = y_test == COVER, y_test == STEGO
    return DetectionResult(
        accuracy=float(np.mean(predicted == y_test)),
        false_alarm=float(np.mean(predicted[covers] == STEGO)),
        missed_detection=float(np.mean(predicted[stegos] == COVER)),
    )
