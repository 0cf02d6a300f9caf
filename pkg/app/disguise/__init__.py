from .adaptation import adapt_output_layer
from .importance import ImportanceScore, grad_magnitude, score_filters, select_top
from .partial import finetune_secret, reinitialize_unselected, train_stego_masked
from .progressive import DisguiseResult, disguise_model, progressive_disguise

__all__ = [
    "adapt_output_layer",
    "ImportanceScore",
    "grad_magnitude",
    "score_filters",
    "select_top",
    "finetune_secret",
    "reinitialize_unselected",
    "train_stego_masked",
    "DisguiseResult",
    "disguise_model",
    "progressive_disguise",
]
