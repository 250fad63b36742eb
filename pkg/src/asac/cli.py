"""Command line entry points.

Every subcommand takes --config <json>, --seed, --out <dir>, and
repeated --set key=value overrides (dotted paths).  All artifacts of a
run land under the out-dir: config.resolved.json, metrics.csv,
checkpoint.asac, and analysis/*.json.  Exit codes: 0 success, 2 config
or contract error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (codebook_usage, export_matrix_json, export_usage_json,
                       pairwise_ks)
from .config import resolve_config, write_resolved
from .data import build_dataset, save_dataset
from .errors import ConfigError, ContractError, NumericsError
from .model import load_checkpoint, save_checkpoint
from .train import (RunRecord, attack_sweep, config_hash, evaluate,
                    metric_row, protocol_efficiency, protocol_fewshot,
                    protocol_transfer, run_id, train, write_metrics_csv)

PROTOCOL_MODES = ("transfer", "fewshot", "efficiency")


def _add_common(sub):
    sub.add_argument("--config", default=None,
                     help="JSON run config; omitted keys take defaults")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the run seed")
    sub.add_argument("--out", default=None,
                     help="output directory (default runs/<run_id>)")
    sub.add_argument("--set", dest="assignments", action="append",
                     default=[], metavar="KEY=VALUE",
                     help="override one config key, dotted paths allowed "
                          "(e.g. model.use_asac=false)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asac",
        description="Train, probe, and analyze attention-schema vision "
                    "transformers on synthetic shape datasets.")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("gen-data", help="write train/test dataset files")
    _add_common(sub)
    sub.set_defaults(func=cmd_gen_data)

    sub = subs.add_parser("train", help="train and write metrics/checkpoint")
    _add_common(sub)
    sub.set_defaults(func=cmd_train)

    sub = subs.add_parser("eval", help="evaluate a checkpoint on test data")
    _add_common(sub)
    sub.add_argument("--checkpoint", required=True)
    sub.set_defaults(func=cmd_eval)

    sub = subs.add_parser("attack", help="adversarial sweep on a checkpoint")
    _add_common(sub)
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--eps", type=float, nargs="+", default=None,
                     help="epsilons to sweep (overrides config)")
    sub.set_defaults(func=cmd_attack)

    sub = subs.add_parser("protocol",
                          help="transfer / fewshot / efficiency study")
    _add_common(sub)
    sub.add_argument("--kind", choices=PROTOCOL_MODES, default=None,
                     help="protocol to run (else taken from config mode)")
    sub.set_defaults(func=cmd_protocol)

    sub = subs.add_parser("analyze-codebook",
                          help="usage histograms and divergence matrices")
    _add_common(sub)
    sub.add_argument("--checkpoint", required=True)
    sub.set_defaults(func=cmd_analyze)

    sub = subs.add_parser("export",
                          help="summarize a run dir's metrics.csv as JSON")
    _add_common(sub)
    sub.set_defaults(func=cmd_export)
    return parser


def _resolve(args, mode=None):
    return resolve_config(args.config, args.assignments, args.seed, mode)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path("runs") / run_id(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _test_split(cfg, image_size: int):
    return build_dataset(cfg.dataset, "test", cfg.test_samples, cfg.seed,
                         image_size)


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "config.resolved.json")
    size = cfg.model.image_size
    save_dataset(build_dataset(cfg.dataset, "train", cfg.train_samples,
                               cfg.seed, size), out / "train.asds")
    save_dataset(build_dataset(cfg.dataset, "test", cfg.test_samples,
                               cfg.seed, size), out / "test.asds")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, mode="train")
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "config.resolved.json")
    model, record = train(cfg)
    save_checkpoint(model, out / "checkpoint.asac")
    write_metrics_csv([record], out / "metrics.csv")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, mode="eval")
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "config.resolved.json")
    model = load_checkpoint(args.checkpoint)
    test = _test_split(cfg, model.cfg.image_size)
    values = evaluate(model, test, cfg.aux_weight, cfg.batch_size)
    rid = run_id(cfg)
    record = RunRecord(rid, cfg.seed, config_hash(cfg),
                       [metric_row(rid, "eval", "test", 0, values)])
    write_metrics_csv([record], out / "metrics.csv")
    return 0


def cmd_attack(args) -> int:
    cfg = _resolve(args, mode="attack")
    if args.eps is not None:
        cfg = replace(cfg, epsilons=tuple(args.eps))
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "config.resolved.json")
    model = load_checkpoint(args.checkpoint)
    test = _test_split(cfg, model.cfg.image_size)
    record = attack_sweep(model, test, cfg)
    write_metrics_csv([record], out / "metrics.csv")
    return 0


def cmd_protocol(args) -> int:
    cfg = _resolve(args, mode=args.kind)
    if cfg.mode not in PROTOCOL_MODES:
        raise ConfigError(f"config key 'mode' must be one of "
                          f"{PROTOCOL_MODES} for protocol runs, got "
                          f"{cfg.mode!r}; pass --kind or set it")
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "config.resolved.json")
    if cfg.mode == "transfer":
        model, records = protocol_transfer(cfg)
        save_checkpoint(model, out / "checkpoint.asac")
    elif cfg.mode == "fewshot":
        records = protocol_fewshot(cfg)
    else:
        records = protocol_efficiency(cfg)
    write_metrics_csv(records, out / "metrics.csv")
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve(args, mode="eval")
    out = _out_dir(args, cfg)
    analysis_dir = out / "analysis"
    analysis_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.resolved.json")
    model = load_checkpoint(args.checkpoint)
    test = _test_split(cfg, model.cfg.image_size)
    if model.cfg.task_mode != "none" and test.task_ids is not None:
        tasks = sorted(int(t) for t in np.unique(test.task_ids))
        per_task = {t: codebook_usage(model, test, task_id=t,
                                      batch_size=cfg.batch_size)
                    for t in tasks}
        hists = [h for t in tasks for h in per_task[t]]
        export_usage_json(hists, analysis_dir / "usage.json")
        if len(tasks) >= 2:
            for layer in range(model.cfg.num_layers):
                matrix = pairwise_ks([per_task[t][layer] for t in tasks])
                export_matrix_json(
                    matrix, analysis_dir / f"pairwise_layer{layer}.json")
    else:
        hists = codebook_usage(model, test, batch_size=cfg.batch_size)
        export_usage_json(hists, analysis_dir / "usage.json")
    return 0


def cmd_export(args) -> int:
    if args.out is None:
        raise ConfigError("export needs --out pointing at a run directory")
    out = Path(args.out)
    path = out / "metrics.csv"
    if not path.exists():
        raise ConfigError(f"no metrics.csv under {out}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    curves = {}
    for row in rows:
        key = (row["run_id"], row["split"])
        curve = curves.setdefault(key, {
            "run_id": row["run_id"], "split": row["split"], "epoch": [],
            "accuracy": [], "total_loss": [], "epsilon": [], "fraction": []})
        curve["epoch"].append(int(row["epoch"]))
        for col in ("accuracy", "total_loss", "epsilon", "fraction"):
            curve[col].append(float(row[col]) if row[col] else None)
    summary = {"rows": len(rows),
               "curves": [curves[k] for k in sorted(curves)]}
    analysis_dir = out / "analysis"
    analysis_dir.mkdir(parents=True, exist_ok=True)
    with open(analysis_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
