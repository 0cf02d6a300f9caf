"""
Exception hierarchy shared by the engine, the pipeline, the CLI and the API.
Every error carries a stable `kind` and the CLI exit code it maps to.
"""
from typing import Any, Dict


class StegoNetError(Exception):
    kind = "error"
    exit_code = 1

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.kind, "message": str(self)}


class ConfigError(StegoNetError, ValueError):
    kind = "config_error"
    exit_code = 2


class ShapeMismatchError(StegoNetError, ValueError):
    kind = "shape_mismatch"


class NonFiniteError(StegoNetError, ArithmeticError):
    kind = "non_finite"


class UnknownOpError(StegoNetError, KeyError):
    kind = "unknown_op"

    def __str__(self) -> str:
        return Exception.__str__(self)


class AutodiffError(StegoNetError, RuntimeError):
    kind = "autodiff"


class SelectionError(StegoNetError, ValueError):
    kind = "selection_error"


class DisguiseError(StegoNetError, RuntimeError):
    kind = "disguise_failed"

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class IntegrityError(StegoNetError):
    kind = "integrity_error"
    exit_code = 3


class ModelFormatError(IntegrityError):
    kind = "model_format"


class CrcMismatchError(IntegrityError):
    kind = "crc_mismatch"


class TrainingDivergedError(StegoNetError, ArithmeticError):
    kind = "training_divergence"
    exit_code = 4


class CapacityExceededError(StegoNetError, ValueError):
    kind = "capacity_exceeded"
    exit_code = 5


class DetectorError(StegoNetError, ValueError):
    kind = "detector_error"
