"""Command-line entry point: ``crl-mmnar <subcommand> CONFIG [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import harness
from .datagen import ConfigError, generate, read_jsonl, write_jsonl
from .kernel.checkpoint import CheckpointError, atomic_write_bytes
from .metrics import reports_to_csv

log = logging.getLogger("crl_mmnar")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="run configuration file (INI)")
    p.add_argument("--seed", type=int, default=None, help="single seed overriding the configured list")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _checkpoint_args(p: argparse.ArgumentParser, default_split: str) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, default=None,
                   help="JSONL dataset (default: the configured data source)")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default=default_split,
                   help="rows of the dataset to use, re-split with the run's split settings")
    p.add_argument("--force", action="store_true", help="proceed despite a config-hash mismatch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crl-mmnar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a dataset and write it as JSONL")
    _common(p)
    p.add_argument("--with-oracle", action="store_true", help="include hidden ground truth per record")

    p = sub.add_parser("train", help="train, rectify and evaluate one or more seeds")
    _common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    _common(p)
    _checkpoint_args(p, "test")

    p = sub.add_parser("ablate", help="incremental component table over the configured seeds")
    _common(p)
    p.add_argument("--baselines", default="zero_fill", help="comma-separated baseline kinds ('' for none)")

    p = sub.add_parser("baseline", help="train an imputation baseline")
    _common(p)
    p.add_argument("--kind", choices=("zero_fill", "mean_impute"), required=True)

    p = sub.add_parser("rectify", help="refit the rectifier table for a checkpoint")
    _common(p)
    _checkpoint_args(p, "val")
    p.add_argument("--kappa", type=float, default=None, help="fixed threshold (default: select on grid)")

    p = sub.add_parser("probe", help="linear probes of the missingness embedding")
    _common(p)
    _checkpoint_args(p, "test")

    p = sub.add_parser("sweep", help="sensitivity of test AUC to one setting")
    _common(p)
    p.add_argument("--setting", required=True, help="section.key, e.g. model.dropout")
    p.add_argument("--values", default=None, help="comma-separated values (default: built-in grid)")
    return parser


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    return cfg


def _dataset(cfg, path):
    return read_jsonl(path) if path is not None else harness.load_dataset(cfg)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode("utf-8"))


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load(args.config)
    data_cfg = cfg.data if args.seed is None else dataclasses.replace(cfg.data, seed=args.seed)
    ds = generate(data_cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    write_jsonl(ds, args.out / "data.jsonl", with_oracle=args.with_oracle)
    print(f"wrote {len(ds)} records to {args.out / 'data.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    results = harness.run_seeds(cfg, out_dir=args.out)
    for r in results:
        if r.status != "ok":
            print(f"seed {r.seed}: diverged at epoch {r.failure['epoch']}, batch {r.failure['batch']}",
                  file=sys.stderr)
            continue
        summary = r.reports[False].summary()
        print(f"seed {r.seed}: best epoch {r.best_epoch}, test mean AUC {summary['mean_auc']:.4f}"
              + (f", kappa {r.kappa}" if r.kappa is not None else ""))
    return EXIT_OK if all(r.status == "ok" for r in results) else EXIT_DIVERGED


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    cfg = dataclasses.replace(cfg, rectifier=dataclasses.replace(cfg.rectifier, enabled=False))
    results = harness.run_seeds(cfg, out_dir=args.out, kind=args.kind)
    for r in results:
        if r.status == "ok":
            print(f"{args.kind} seed {r.seed}: test mean AUC {r.reports[False].summary()['mean_auc']:.4f}")
    return EXIT_OK if all(r.status == "ok" for r in results) else EXIT_DIVERGED


def _loaded(args):
    cfg = cfgmod.load(args.config)
    ds = _dataset(cfg, args.dataset)
    run = harness.load_run(args.checkpoint, ds, expected=cfg, force=args.force)
    return run, harness.select_split(run.config, ds, args.split)


def cmd_evaluate(args) -> int:
    run, ds = _loaded(args)
    reps = harness.evaluate_run(run, ds)
    rows = [row for rep in reps for row in rep.csv_rows(run.seed)]
    _write_text(args.out / "metrics.csv", reports_to_csv(rows))
    _write_text(args.out / "metrics.json",
                json.dumps({str(r.rectified).lower(): json.loads(r.to_json()) for r in reps},
                           indent=2, sort_keys=True) + "\n")
    for rep in reps:
        print(f"rectified={str(rep.rectified).lower()}: mean AUC {rep.summary()['mean_auc']:.4f}, "
              f"mean Brier {rep.summary()['mean_brier']:.4f}")
    return EXIT_OK


def cmd_rectify(args) -> int:
    run, ds = _loaded(args)
    table = harness.refit_rectifier(run, ds, args.kappa)
    args.out.mkdir(parents=True, exist_ok=True)
    table.save(args.out / "rectifier.tsv")
    print(f"kappa {table.kappa}: {100 * table.fraction_applied():.1f}% of fold cells applied")
    return EXIT_OK


def cmd_probe(args) -> int:
    run, ds = _loaded(args)
    report = harness.probe_run(run, ds, run.seed if args.seed is None else args.seed)
    _write_text(args.out / "probe.json", json.dumps(dataclasses.asdict(report), indent=2, sort_keys=True) + "\n")
    print(f"pattern probe accuracy {report.accuracy:.4f} (majority {report.majority_rate:.4f})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    kinds = tuple(k for k in args.baselines.split(",") if k.strip())
    result = harness.ablate(cfg, out_dir=args.out, baselines=kinds)
    print(result.to_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = args.values.split(",") if args.values else None
    rows = harness.sweep(cfg, args.setting, values, out_dir=args.out)
    for r in rows:
        print(f"{r['setting']}={r['value']}: mean AUC {r['mean_auc']:.4f} (sd {r['sd_auc']:.4f})")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "baseline": cmd_baseline, "rectify": cmd_rectify, "probe": cmd_probe, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except harness.ConfigMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except harness.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
