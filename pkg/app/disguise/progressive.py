"""
Progressive model disguising.

Each iteration t keeps P_t = round(lambda_p^t * V) of the previously selected
filters, fine-tunes that secret sub-network, reinitializes everything else
and trains the stego task under the freeze mask. The loop stops at the first
iteration whose stego reduction is below tau_st; an iteration whose secret
reduction reaches tau_se is rolled back to the previous one.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.config import get_settings
from app.errors import ConfigError, DisguiseError, SelectionError
from app.log import log_info
from app.models.adaptation import AdaptationMeta, secret_output_layer
from app.models.graph import BatchNormStats, ModelGraph
from app.models.schemas import DisguiseConfig, DisguiseReport, IterationRecord, TrainConfig
from app.models.selection import (
    FilterSelection,
    embed_subnetwork,
    extract_subnetwork,
    scatter_bn_stats,
    selection_to_mask,
)
from app.disguise.adaptation import adapt_output_layer
from app.disguise.importance import merge_pinned, score_filters, select_top
from app.disguise.partial import finetune_secret, reinitialize_unselected, train_stego_masked
from app.sideinfo.keyed import StegoKey
from app.sideinfo.lsb import embed
from app.sideinfo.payload import frame_payload
from app.tasks.datasets import TaskData
from app.tasks.metrics import evaluate, reduction
from app.tasks.training import check_compatible, train_model

# stage ids for per-iteration seeds
_ADAPT, _FINETUNE, _REINIT, _STEGO = 1, 2, 3, 4


@dataclass
class DisguiseResult:
    stego: ModelGraph
    selection: FilterSelection
    adapt: AdaptationMeta
    bn_stats: BatchNormStats
    report: DisguiseReport
    tuned_secret: ModelGraph
    cover: ModelGraph


@dataclass
class _Iterate:
    selection: FilterSelection
    tuned: ModelGraph
    stego: ModelGraph
    bn_stats: BatchNormStats


def stage_seed(seed: int, t: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, t, stage]).generate_state(1)[0])


def schedule(lambda_p: float, total: int, t: int) -> int:
    """P_t = round(lambda_p^t * V), halves rounded up."""
    return int(math.floor(lambda_p ** t * total + 0.5))


def progressive_disguise(
    secret: ModelGraph,
    secret_data: TaskData,
    stego_data: TaskData,
    cfg: DisguiseConfig,
    cover: Optional[ModelGraph] = None,
) -> DisguiseResult:
    if secret_data.spec.input_shape != stego_data.spec.input_shape:
        raise ConfigError(f"secret inputs {secret_data.spec.input_shape} and stego inputs "
                          f"{stego_data.spec.input_shape} differ")
    check_compatible(secret, secret_data.spec)
    batches = cfg.grad_batches or get_settings().grad_batches

    adapted, adapt = adapt_output_layer(
        secret, stego_data.spec.output_dim, np.random.default_rng(stage_seed(cfg.seed, 0, _ADAPT)), cfg.added_neurons
    )
    check_compatible(adapted, stego_data.spec)

    secret_metric, stego_metric = secret_data.spec.metric, stego_data.spec.metric
    secret_baseline = evaluate(secret, secret_data)
    if cover is None:
        cover = train_model(
            adapted.layers, stego_data,
            TrainConfig(epochs=cfg.epochs_stego, lr=cfg.lambda_t, batch_size=cfg.batch_size, seed=cfg.seed),
            tag="cover",
        )
    elif cover.layers != adapted.layers:
        raise ConfigError("cover model architecture differs from the adapted secret architecture")
    stego_baseline = evaluate(cover, stego_data)
    log_info(f"baselines: secret {secret_metric}={secret_baseline:.4f}, stego {stego_metric}={stego_baseline:.4f}")

    full = FilterSelection.full(adapted, adapt)
    out_layer = secret_output_layer(adapted, adapt)
    scored = [layer for layer in full.layers if layer != out_layer]
    if not scored:
        raise SelectionError("the secret model has no selectable layer besides its output layer")
    total = sum(len(full.get(layer)) for layer in scored)
    tau_se = cfg.secret_threshold(secret_metric)

    report = DisguiseReport(
        secret_metric=secret_metric,
        stego_metric=stego_metric,
        secret_baseline=secret_baseline,
        stego_baseline=stego_baseline,
        tau_se=tau_se,
        tau_st=cfg.tau_st,
        lambda_p=cfg.lambda_p,
        total_filters=total,
        adaptation=adapt.to_dict(),
        expansion_rate=adapted.num_params / secret.num_params - 1.0,
    )

    previous = _Iterate(
        selection=full,
        tuned=extract_subnetwork(adapted, full, adapted.running_stats(), adapt),
        stego=adapted,
        bn_stats=adapted.running_stats(),
    )
    accepted: Optional[_Iterate] = None
    last_p = total
    t = 0
    while True:
        t += 1
        if cfg.max_iterations is not None and len(report.iterations) >= cfg.max_iterations:
            if report.iterations:
                report.iterations[-1].outcome = "limit"
            raise DisguiseError(f"no iteration met tau_st={cfg.tau_st} within {cfg.max_iterations} iterations",
                                report=report)
        p = schedule(cfg.lambda_p, total, t)
        if p >= last_p:
            log_info(f"iteration {t}: P={p} does not shrink the selection, skipped")
            continue
        if p < len(scored):
            if accepted is None:
                raise SelectionError(f"P_{t}={p} is below the {len(scored)} selectable layers")
            raise DisguiseError(f"selection floor reached at iteration {t} before tau_st={cfg.tau_st} was met",
                                report=report)
        last_p = p
        log_info(f"iteration {t}: P={p} of V={total}")

        scores = score_filters(previous.stego, previous.selection, secret_data, stego_data, cfg.lambda_g, batches,
                               secret_model=previous.tuned, adapt=adapt)
        selection = merge_pinned(select_top(scores, p), full, [out_layer])

        warm = embed_subnetwork(adapted, previous.tuned, previous.selection, adapt)
        warm_stats = scatter_bn_stats(adapted, previous.tuned, previous.selection, adapt)
        tuned = finetune_secret(extract_subnetwork(warm, selection, warm_stats, adapt), secret_data, cfg,
                                stage_seed(cfg.seed, t, _FINETUNE))
        secret_value = evaluate(tuned, secret_data)
        alpha_se = reduction(secret_metric, secret_baseline, secret_value)

        mask = selection_to_mask(adapted, selection, adapt)
        start = reinitialize_unselected(adapted, mask, np.random.default_rng(stage_seed(cfg.seed, t, _REINIT)))
        start = embed_subnetwork(start, tuned, selection, adapt)
        stego = train_stego_masked(start, mask, stego_data, cfg, stage_seed(cfg.seed, t, _STEGO))
        stego_value = evaluate(stego, stego_data)
        alpha_st = reduction(stego_metric, stego_baseline, stego_value)

        current = _Iterate(selection, tuned, stego, scatter_bn_stats(adapted, tuned, selection, adapt))
        record = IterationRecord(
            t=t, p=p, alpha_se=alpha_se, alpha_st=alpha_st, secret_metric=secret_value, stego_metric=stego_value,
            sizes={str(layer): size for layer, size in selection.sizes().items()},
            kept={str(layer): sorted(s) for layer, s in selection.layers.items()}, outcome="continue",
        )
        report.iterations.append(record)
        log_info(f"iteration {t}: alpha_se={alpha_se:.5f} (tau {tau_se}), alpha_st={alpha_st:.5f} (tau {cfg.tau_st})")

        if alpha_se >= tau_se:
            record.outcome = "rollback"
            if accepted is None:
                raise DisguiseError(f"the secret model cannot be disguised: alpha_se={alpha_se:.5f} >= "
                                    f"tau_se={tau_se} at the first iteration", report=report)
            log_info(f"iteration {t}: secret threshold violated, rolling back to iteration {report.iterations[-2].t}")
            report.final_iteration = report.iterations[-2].t
            break
        accepted = current
        if alpha_st < cfg.tau_st:
            record.outcome = "break-success"
            report.final_iteration = t
            log_info(f"iteration {t}: both thresholds met")
            break
        previous = current

    return DisguiseResult(
        stego=accepted.stego,
        selection=accepted.selection,
        adapt=adapt,
        bn_stats=accepted.bn_stats,
        report=report,
        tuned_secret=accepted.tuned,
        cover=cover,
    )


def disguise_model(
    secret: ModelGraph,
    secret_data: TaskData,
    stego_data: TaskData,
    cfg: DisguiseConfig,
    key: StegoKey,
    cover: Optional[ModelGraph] = None,
) -> Tuple[ModelGraph, DisguiseResult]:
    """Progressive disguising followed by side-information embedding under `key`."""
    result = progressive_disguise(secret, secret_data, stego_data, cfg, cover)
    payload = frame_payload(result.stego, result.selection, result.adapt, result.bn_stats)
    return embed(result.stego, payload, key), result
