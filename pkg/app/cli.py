"""
Command line: python -m app <command> [options]

Errors are written to stderr as one JSON object {"error": kind, "message": ...}
and mapped to exit codes (2 config, 3 integrity, 4 divergence, 5 capacity).
"""
import json
import sys
from argparse import ArgumentDefaultsHelpFormatter, ArgumentParser, Namespace
from pathlib import Path
from typing import List, Optional

import pandas as pd

from app.config import get_settings
from app.disguise.progressive import disguise_model
from app.errors import ConfigError, DisguiseError, StegoNetError
from app.log import log_info, set_log_level, set_log_level_to_debug
from app.models.schemas import (
    CONFIG_SCHEMAS,
    OUTPUT_SCHEMAS,
    ArchSpec,
    DisguiseConfig,
    DisguiseReport,
    PoolConfig,
    TaskSpec,
    TrainConfig,
    dump_json,
    load_config,
)
from app.models.serialization import save_model
from app.recovery import recover
from app.services import capacity, evaluate_model, inspect_model, read_model
from app.sideinfo.keyed import StegoKey
from app.steganalysis.pool import build_pool, detect, results_table
from app.tasks.datasets import make_dataset
from app.tasks.training import train_model


def _emit(text: str):
    sys.stdout.write(text + "\n")


def _write(path: str, text: str):
    try:
        Path(path).write_text(text + "\n")
    except OSError as e:
        raise ConfigError(f"cannot write {path}: {e}")


def _save(model, path: str):
    try:
        save_model(model, path)
    except OSError as e:
        raise ConfigError(f"cannot write {path}: {e}")


def cmd_train(args: Namespace):
    task = load_config(args.task, TaskSpec)
    arch = load_config(args.arch, ArchSpec)
    cfg = load_config(args.config, TrainConfig) if args.config else TrainConfig()
    model = train_model(arch.layers, make_dataset(task), cfg)
    _save(model, args.out)
    log_info(f"saved {args.out}")


def cmd_disguise(args: Namespace):
    secret = read_model(args.secret)
    secret_task = load_config(args.secret_task, TaskSpec)
    stego_task = load_config(args.stego_task, TaskSpec)
    cfg = load_config(args.config, DisguiseConfig) if args.config else DisguiseConfig()
    cover = read_model(args.cover) if args.cover else None
    try:
        stego, result = disguise_model(secret, make_dataset(secret_task), make_dataset(stego_task), cfg,
                                       StegoKey.parse(args.key), cover)
    except DisguiseError as e:
        if args.report and e.report is not None:
            _write(args.report, dump_json(e.report))
        raise
    _save(stego, args.out)
    if args.report:
        _write(args.report, dump_json(result.report))
    if args.tuned_out:
        _save(result.tuned_secret, args.tuned_out)
    if args.cover_out:
        _save(result.cover, args.cover_out)
    log_info(f"saved {args.out} (final iteration {result.report.final_iteration})")


def cmd_recover(args: Namespace):
    secret = recover(read_model(args.stego), StegoKey.parse(args.key))
    _save(secret, args.out)
    log_info(f"saved {args.out}")


def cmd_evaluate(args: Namespace):
    result = evaluate_model(read_model(args.model), load_config(args.task, TaskSpec), args.split)
    _emit(dump_json(result, indent=None))


def cmd_capacity(args: Namespace):
    _emit(dump_json(capacity(read_model(args.secret), read_model(args.stego)), indent=None))


def cmd_steganalyze(args: Namespace):
    cfg = load_config(args.pool, PoolConfig)
    pool = build_pool(cfg, workers=args.workers, progress=not args.quiet)
    report = detect(cfg, pool, sanity=args.sanity)
    if args.features:
        _write(args.features, pool.features.to_json(orient="records"))
    if args.out:
        _write(args.out, dump_json(report))
    _emit(results_table(report))


def cmd_inspect(args: Namespace):
    task = load_config(args.task, TaskSpec) if args.task else None
    if args.scores and task is None:
        raise ConfigError("--scores needs --task")
    stego_task = load_config(args.stego_task, TaskSpec) if args.stego_task else None
    result = inspect_model(read_model(args.model), task if args.scores else None, stego_task,
                           lambda_g=args.lambda_g, batches=args.batches)
    _emit(dump_json(result))


def render_report(report: DisguiseReport) -> str:
    frame = pd.DataFrame([r.model_dump(exclude={"sizes", "kept"}) for r in report.iterations],
                         columns=["t", "p", "alpha_se", "alpha_st", "secret_metric", "stego_metric", "outcome"])
    lines = [
        f"secret {report.secret_metric} baseline {report.secret_baseline:.4f} (tau_se {report.tau_se})",
        f"stego  {report.stego_metric} baseline {report.stego_baseline:.4f} (tau_st {report.tau_st})",
        f"V={report.total_filters}  lambda_p={report.lambda_p}  adaptation={report.adaptation.get('mode', 'none')}",
        f"final iteration: {report.final_iteration}  expansion rate: {report.expansion_rate}",
        "",
        frame.to_string(index=False, float_format=lambda v: f"{v:.5f}") if len(frame) else "(no iterations)",
    ]
    return "\n".join(lines)


def cmd_report(args: Namespace):
    _emit(render_report(load_config(args.report, DisguiseReport)))


def cmd_schemas(args: Namespace):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create {out}: {e}")
    for name, model in {**CONFIG_SCHEMAS, **OUTPUT_SCHEMAS}.items():
        _write(str(out / f"{name}.schema.json"), json.dumps(model.model_json_schema(), indent=2, sort_keys=True))
    log_info(f"wrote {len(CONFIG_SCHEMAS) + len(OUTPUT_SCHEMAS)} schemas to {out}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="stegonet", description="Hide, recover and audit secret networks inside stego networks.",
                            formatter_class=ArgumentDefaultsHelpFormatter)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--task", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("disguise", help="hide a secret model in a stego model")
    p.add_argument("--secret", required=True)
    p.add_argument("--secret-task", required=True)
    p.add_argument("--stego-task", required=True)
    p.add_argument("--config", help="DisguiseConfig JSON")
    p.add_argument("--key", required=True, help="u64, decimal or 0x hex")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--cover", help="pre-trained cover model on the adapted architecture")
    p.add_argument("--cover-out", help="save the cover baseline model")
    p.add_argument("--tuned-out", help="save the sender-side tuned secret sub-network")
    p.set_defaults(func=cmd_disguise)

    p = sub.add_parser("recover", help="recover the secret model with the key")
    p.add_argument("--stego", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("evaluate", help="metric of a model on a task")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("capacity", help="expansion rate of a stego model")
    p.add_argument("--secret", required=True)
    p.add_argument("--stego", required=True)
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("steganalyze", help="model pool + histogram detectors")
    p.add_argument("--pool", required=True, help="PoolConfig JSON")
    p.add_argument("--sanity", action="store_true", help="also run the planted-signal pool")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="DetectionReport JSON")
    p.add_argument("--features", help="pool features JSON")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(func=cmd_steganalyze)

    p = sub.add_parser("inspect", help="architecture summary and optional filter scores")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", action="store_true")
    p.add_argument("--task", help="secret-side task for --scores")
    p.add_argument("--stego-task", help="stego-side task for --scores (defaults to --task)")
    p.add_argument("--lambda-g", type=float, default=0.01)
    p.add_argument("--batches", type=int)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="render a disguise report")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schemas", help="write JSON Schemas of configs and outputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schemas)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_log_level(get_settings().log_level)
        if args.verbose:
            set_log_level_to_debug()
        args.func(args)
    except StegoNetError as e:
        sys.stderr.write(json.dumps(e.to_dict()) + "\n")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
