from .features import histogram_feature, plant_signal
from .detectors import DetectionResult, split_pairs, train_detector
from .pool import PoolResult, build_pool, detect

__all__ = [
    "histogram_feature",
    "plant_signal",
    "DetectionResult",
    "split_pairs",
    "train_detector",
    "PoolResult",
    "build_pool",
    "detect",
]
