"""Command-line entry point: ``deconfts <command> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 validation error, 2 runtime or divergence error.
Logs go to stderr; data only to files.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import evaluation as ev
from . import factor_model as fm
from . import forecaster as fc
from . import ingest as ing
from .config import RunConfig, dump_config, load_config
from .data import resolve_dataset
from .errors import (CheckpointError, ConfigError, DatasetInvariantError, DeconfError, InsufficientDataError,
                     InvalidArgumentError, ParseError)
from .gradcheck import TOLERANCE, run_gradchecks
from .simgen import SCHEMA_VERSION, generate_dataset, read_dataset, write_dataset

logger = logging.getLogger("deconfts")

OUT_ENV = "DECONFTS_OUT_DIR"
VALIDATION_ERRORS = (ConfigError, ParseError, CheckpointError, DatasetInvariantError, InvalidArgumentError,
                     InsufficientDataError, FileNotFoundError)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.paths.out or os.environ.get(OUT_ENV) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(args, cfg: RunConfig):
    source = args.data or cfg.paths.dataset
    if source is None:
        raise ConfigError("no dataset given: pass --data or set paths.dataset")
    return read_dataset(resolve_dataset(source))


def _write_loss_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ev.DIAGNOSTIC_COLUMNS)
        for epoch, loss, r2 in rows:
            w.writerow([epoch, repr(float(loss)), repr(float(r2))])


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    ds = generate_dataset(cfg.sim)
    write_dataset(ds, out / "dataset.csv")
    logger.info("wrote %d sequences to %s (seed %d)", len(ds), out / "dataset.csv", cfg.sim.seed)
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    source = args.input or cfg.paths.input
    if source is None:
        raise ConfigError("no GPS input given: pass --input or set paths.input")
    ic = cfg.ingest
    ds = ing.ingest_csv(source, ic.gap_threshold_s, ic.min_trip_len, ic.resample_interval_s, ic.seq_len)
    out = _out_dir(args, cfg)
    write_dataset(ds, out / "dataset.csv")
    logger.info("ingested %d sequences from %s", len(ds), source)
    return 0


def cmd_train_factor(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    out = _out_dir(args, cfg)
    rows = []
    monitor = ds if ds.has_confounder else None

    def on_epoch(epoch, model, loss):
        rows.append((epoch, loss, ev.confounder_recovery(model, monitor) if monitor is not None else float("nan")))

    model, _ = fm.train_factor_model(ds, cfg.factor, on_epoch=on_epoch)
    fm.save_factor_model(model, out / "factor.json")
    _write_loss_csv(out / "factor_loss.csv", rows)
    return 0


def cmd_train_forecaster(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    out = _out_dir(args, cfg)
    factor = None
    path = args.factor or cfg.paths.factor_checkpoint
    if cfg.forecaster.use_confounder:
        if path is None:
            raise ConfigError("forecaster.use_confounder is set: pass --factor or set paths.factor_checkpoint")
        factor = fm.load_factor_model(path)
    model, history = fc.train_forecaster(ds, factor, cfg.forecaster)
    fc.save_forecaster(model, out / "forecaster.json")
    if getattr(model, "factor", None) is not None:
        fm.save_factor_model(model.factor, out / "factor_joint.json")
    with open(out / "forecaster_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    out = _out_dir(args, cfg)
    path = args.forecaster or cfg.paths.forecaster_checkpoint
    if path is None:
        raise ConfigError("pass --forecaster or set paths.forecaster_checkpoint")
    model = fc.load_forecaster(path)
    factor = None
    fpath = args.factor or cfg.paths.factor_checkpoint
    if model.cfg.use_confounder:
        if fpath is None:
            raise ConfigError("checkpoint uses the confounder channel: pass --factor")
        factor = fm.load_factor_model(fpath)
    metrics, index = ev.evaluate_forecaster(model, factor, ds)
    report = dataclasses.asdict(metrics)
    report["n_windows"] = int(len(index))
    if factor is not None and ds.has_confounder:
        report["confounder_aligned_r2"] = ev.confounder_recovery(factor, ds)
    with open(out / "metrics.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    if args.data or cfg.paths.dataset:
        ds = _dataset(args, cfg)
    else:
        ds = generate_dataset(cfg.sim)
    cfg.grid.validate(ds.T)
    out = _out_dir(args, cfg)
    workers = args.parallel or cfg.run.parallel
    with open(out / "run.cfg", "w") as fh:
        fh.write(dump_config(cfg))
    ev.run_experiment_grid(ds, cfg.grid, cfg.factor, cfg.forecaster, out_dir=out, workers=workers)
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = run_gradchecks(corrupt=args.corrupt)
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.family:10s} max_rel_error={r.max_rel_error:.3e} worst={r.worst_param} "
              f"values={r.n_values} {status}")
        failed |= not r.ok
    if failed:
        bad = ", ".join(f"{r.family}:{r.worst_param}" for r in results if not r.ok)
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {bad}", file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "train-factor": cmd_train_factor,
    "train-forecaster": cmd_train_forecaster,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deconfts", description="Deconfounded time-series forecasting toolkit.")
    parser.add_argument("--version", action="version", version=f"deconfts {__version__} (schema {SCHEMA_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI-style run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./out)")
        if name in ("train-factor", "train-forecaster", "evaluate", "experiment"):
            p.add_argument("--data", help="dataset CSV (or 'tiny' for the bundled sample)")
        if name in ("train-forecaster", "evaluate"):
            p.add_argument("--factor", help="factor model checkpoint")
        if name == "evaluate":
            p.add_argument("--forecaster", help="forecaster checkpoint")
        if name == "ingest":
            p.add_argument("--input", help="GPS CSV with entity_id,timestamp,lat,lon")
        if name == "experiment":
            p.add_argument("--parallel", type=int, default=None, metavar="N", help="worker processes")
        if name == "gradcheck":
            p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DeconfError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
