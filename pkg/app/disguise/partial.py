"""
Partial optimization: secret fine-tuning, reinitialization of the free
parameters, and mask-constrained stego training.
"""
import numpy as np

from app.engine.optim import kaiming_normal
from app.errors import DisguiseError
from app.log import log_debug
from app.models.graph import ModelGraph
from app.models.schemas import DisguiseConfig
from app.models.selection import ParameterMask
from app.tasks.datasets import TaskData
from app.tasks.training import fit


def finetune_secret(sub: ModelGraph, secret_data: TaskData, cfg: DisguiseConfig, seed: int) -> ModelGraph:
    """Train the secret sub-network alone on the secret task (lr lambda_e)."""
    tuned = sub.copy()
    fit(tuned, secret_data.train, secret_data.spec.loss_kind, epochs=cfg.epochs_secret, lr=cfg.lambda_e,
        batch_size=cfg.batch_size, seed=seed, tag="finetune-secret")
    return tuned


def reinitialize_unselected(stego: ModelGraph, mask: ParameterMask, rng: np.random.Generator) -> ModelGraph:
    """Fresh values for every free (M=1) parameter; frozen values are kept.

    Weights get Kaiming draws, biases 0, gamma 1, beta 0; running statistics
    restart at mean 0, var 1.
    """
    out = stego.copy()
    free = mask.values == 1
    for i, spec in enumerate(out.layers):
        if spec.is_weighted:
            w, m = out.view(i, "weight"), out.view(i, "weight", free)
            w[m] = kaiming_normal(spec.weight_shape, rng)[m]
            b, m = out.view(i, "bias"), out.view(i, "bias", free)
            b[m] = 0.0
        elif spec.kind == "batchnorm":
            out.view(i, "gamma")[out.view(i, "gamma", free)] = 1.0
            out.view(i, "beta")[out.view(i, "beta", free)] = 0.0
            out.view(i, "running_mean")[...] = 0.0
            out.view(i, "running_var")[...] = 1.0
    return out


def train_stego_masked(stego: ModelGraph, mask: ParameterMask, stego_data: TaskData,
                       cfg: DisguiseConfig, seed: int) -> ModelGraph:
    """Train the stego task with every M=0 parameter frozen (lr lambda_t)."""
    trained = stego.copy()
    fit(trained, stego_data.train, stego_data.spec.loss_kind, epochs=cfg.epochs_stego, lr=cfg.lambda_t,
        batch_size=cfg.batch_size, seed=seed, update_mask=mask.values == 1, tag="train-stego")
    frozen = mask.frozen
    if not np.array_equal(trained.params[frozen].view(np.uint32), stego.params[frozen].view(np.uint32)):
        raise DisguiseError("masked training changed a frozen parameter")
    log_debug(f"stego training kept {mask.frozen_count} frozen params bit-identical")
    return trained
