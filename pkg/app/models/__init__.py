from .graph import BatchNormStats, LayerSpec, ModelGraph, init_graph
from .adaptation import AdaptationMeta, AdaptationMode
from .selection import FilterSelection, ParameterMask, embed_subnetwork, extract_subnetwork, selection_to_mask
from .serialization import load_model, save_model

__all__ = [
    "BatchNormStats",
    "LayerSpec",
    "ModelGraph",
    "init_graph",
    "AdaptationMeta",
    "AdaptationMode",
    "FilterSelection",
    "ParameterMask",
    "embed_subnetwork",
    "extract_subnetwork",
    "selection_to_mask",
    "load_model",
    "save_model",
]
