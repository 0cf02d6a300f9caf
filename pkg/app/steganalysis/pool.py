"""
Model pool for the undetectability protocol: one cover and one stego model
per (task pair, architecture, seed) cell, then detectors on their histogram
features.
"""
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.config import get_settings
from app.errors import StegoNetError
from app.log import log_info, log_warning
from app.models.schemas import DetectionReport, DetectorResult, PoolConfig, PoolMember
from app.disguise.progressive import disguise_model
from app.sideinfo.keyed import StegoKey
from app.steganalysis.detectors import COVER, STEGO, split_pairs, train_detector
from app.steganalysis.features import histogram_feature, plant_signal
from app.tasks.datasets import make_dataset
from app.tasks.training import train_model


@dataclass(frozen=True)
class PoolCell:
    pair: int
    arch: int
    seed: int


@dataclass
class PoolResult:
    members: List[PoolMember]
    features: pd.DataFrame

    @property
    def failed_cells(self) -> int:
        return sum(1 for m in self.members if m.label == "stego" and not m.ok)


def pool_cells(cfg: PoolConfig) -> List[PoolCell]:
    return [
        PoolCell(p, a, s)
        for p, a, s in itertools.product(range(len(cfg.task_pairs)), range(len(cfg.architectures)), cfg.seeds)
    ]


def run_cell(cfg: PoolConfig, cell: PoolCell) -> Dict[str, Any]:
    """Train the secret model, disguise it and featurize cover, stego and planted cover."""
    pair = cfg.task_pairs[cell.pair]
    arch = cfg.architectures[cell.arch].with_output(pair.secret.output_dim)
    try:
        secret_data, stego_data = make_dataset(pair.secret), make_dataset(pair.stego)
        secret = train_model(arch.layers, secret_data, cfg.train.model_copy(update={"seed": cell.seed}),
                             tag=f"secret[{cell.pair},{cell.arch},{cell.seed}]")
        disguise_cfg = cfg.disguise.model_copy(update={"seed": cell.seed})
        stego, result = disguise_model(secret, secret_data, stego_data, disguise_cfg, StegoKey(cfg.key))
    except StegoNetError as e:
        return {"cell": cell, "error": f"{e.kind}: {e}"}
    planted = plant_signal(result.cover, np.random.default_rng([cell.seed, cell.pair, cell.arch]))
    return {
        "cell": cell,
        "error": None,
        "params": stego.num_params,
        "cover": histogram_feature(result.cover, cfg.bins),
        "stego": histogram_feature(stego, cfg.bins),
        "planted": histogram_feature(planted, cfg.bins),
    }


def _run_cell_args(args: Tuple[PoolConfig, PoolCell]) -> Dict[str, Any]:
    return run_cell(*args)


def build_pool(cfg: PoolConfig, workers: Optional[int] = None, progress: bool = True) -> PoolResult:
    """Run every cell (in parallel when workers > 1); results keep grid order."""
    cells = pool_cells(cfg)
    workers = workers or cfg.workers or get_settings().workers
    log_info(f"building pool: {len(cells)} cells on {workers} workers")
    jobs = [(cfg, cell) for cell in cells]
    bar = tqdm(total=len(cells), desc="pool", disable=not progress)
    outputs = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            for output in executor.map(_run_cell_args, jobs):
                outputs.append(output)
                bar.update(1)
    else:
        for job in jobs:
            outputs.append(_run_cell_args(job))
            bar.update(1)
    bar.close()

    members, rows = [], []
    for output in outputs:
        cell = output["cell"]
        ok = output["error"] is None
        if not ok:
            log_warning(f"pool cell pair={cell.pair} arch={cell.arch} seed={cell.seed} failed: {output['error']}")
        for label in ("cover", "stego"):
            members.append(PoolMember(pair=cell.pair, arch=cell.arch, seed=cell.seed, label=label, ok=ok,
                                      error=output["error"], params=output.get("params")))
        if not ok:
            continue
        for label in ("cover", "stego", "planted"):
            rows.append({"pair": cell.pair, "arch": cell.arch, "seed": cell.seed, "label": label,
                         **{f"f{k}": v for k, v in enumerate(output[label])}})
    columns = ["pair", "arch", "seed", "label"] + [f"f{k}" for k in range(cfg.bins)]
    return PoolResult(members, pd.DataFrame(rows, columns=columns))


def _pair_matrix(frame: pd.DataFrame, negative: str, positive: str):
    """Rows ordered pair by pair (negative, positive), with the pair id of each row."""
    feature_cols = [c for c in frame.columns if c.startswith("f")]
    neg = frame[frame["label"] == negative].reset_index(drop=True)
    pos = frame[frame["label"] == positive].reset_index(drop=True)
    n = len(neg)
    features = np.empty((2 * n, len(feature_cols)))
    features[0::2] = neg[feature_cols].to_numpy()
    features[1::2] = pos[feature_cols].to_numpy()
    labels = np.tile([COVER, STEGO], n)
    return features, labels, n


def detect(cfg: PoolConfig, pool: PoolResult, sanity: bool = False) -> DetectionReport:
    """Train every configured detector on a pair-wise split of the pool."""
    pools = [("protocol", "stego")] + ([("sanity", "planted")] if sanity else [])
    results = []
    for name, positive in pools:
        features, labels, n_pairs = _pair_matrix(pool.features, "cover", positive)
        train_pairs, test_pairs = split_pairs(n_pairs, cfg.train_fraction, cfg.split_seed)
        train_rows = np.concatenate([2 * train_pairs, 2 * train_pairs + 1])
        test_rows = np.concatenate([2 * test_pairs, 2 * test_pairs + 1])
        for kind in cfg.detectors:
            outcome = train_detector(features, labels, kind, train_rows, test_rows,
                                     epochs=cfg.detector_epochs, lr=cfg.detector_lr, seed=cfg.split_seed)
            log_info(f"{name} pool, {kind} detector: accuracy {outcome.accuracy:.4f}, P_E {outcome.p_e:.4f}")
            results.append(DetectorResult(
                detector=kind, pool=name, accuracy=outcome.accuracy, p_e=outcome.p_e,
                false_alarm=outcome.false_alarm, missed_detection=outcome.missed_detection,
                train_pairs=len(train_pairs), test_pairs=len(test_pairs),
            ))
    return DetectionReport(members=pool.members, failed_cells=pool.failed_cells, results=results)


def results_table(report: DetectionReport) -> str:
    frame = pd.DataFrame([r.model_dump() for r in report.results])
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")
