from .datasets import Dataset, TaskData, make_dataset
from .metrics import evaluate
from .training import fit, train_model

__all__ = ["Dataset", "TaskData", "make_dataset", "evaluate", "fit", "train_model"]
