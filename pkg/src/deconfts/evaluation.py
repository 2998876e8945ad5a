"""Metrics, confounder-recovery scores and the with/without-confounder grid."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import factor_model as fm
from . import forecaster as fc
from .errors import ConfigError, InsufficientDataError, ShapeError
from .numerics import Rng
from .simgen import Dataset

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["model", "sl", "pl", "with_confounder", "mse", "mae", "rmse", "r2", "seed", "gamma_a", "gamma_y"]
DIAGNOSTIC_COLUMNS = ["epoch", "factor_loss", "aligned_r2"]


@dataclass
class MetricReport:
    mse: float
    mae: float
    rmse: float
    r2: float
    n: int
    r2_defined: bool = True


def compute_metrics(pred, truth) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction length {pred.size} != truth length {truth.size}")
    if pred.size == 0:
        raise ShapeError("metrics need at least one value")
    err = pred - truth
    mse = float(np.mean(err * err))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot > 0:
        r2, ok = 1.0 - float(np.sum(err * err)) / ss_tot, True
    else:
        r2, ok = math.nan, False
    return MetricReport(mse=mse, mae=float(np.mean(np.abs(err))), rmse=math.sqrt(mse), r2=r2, n=pred.size, r2_defined=ok)


@dataclass
class AlignedFit:
    r2: float
    coef: np.ndarray
    intercept: float
    degenerate: bool = False


def aligned_fit(zhat, z) -> AlignedFit:
    """OLS ``z ~ zhat @ coef + intercept``; R^2 of that fit.

    The latent confounder is only identified up to an affine map, so the
    estimate is aligned before scoring.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    zhat = np.asarray(zhat, dtype=np.float64)
    zhat = zhat.reshape(z.size, -1) if zhat.size != z.size else zhat.reshape(-1, 1)
    if zhat.shape[0] != z.size:
        raise ShapeError(f"zhat has {zhat.shape[0]} rows, z has {z.size}")
    if z.size < 3:
        raise InsufficientDataError(f"aligned R^2 needs at least 3 samples, got {z.size}")
    centered = zhat - zhat.mean(axis=0)
    live = np.any(centered != 0, axis=0)
    zc = z - z.mean()
    ss_tot = float(zc @ zc)
    if not live.any() or ss_tot == 0:
        return AlignedFit(0.0, np.zeros(zhat.shape[1]), float(z.mean()), degenerate=True)
    coef = np.zeros(zhat.shape[1])
    sol, *_ = np.linalg.lstsq(centered[:, live], zc, rcond=None)
    coef[live] = sol
    resid = zc - centered[:, live] @ sol
    r2 = 1.0 - float(resid @ resid) / ss_tot
    return AlignedFit(r2, coef, float(z.mean() - zhat.mean(axis=0) @ coef))


def aligned_r2(zhat, z) -> float:
    return aligned_fit(zhat, z).r2


def confounder_recovery(model: fm.FactorModel, ds: Dataset) -> float:
    """Aligned R^2 between inferred and true confounders pooled over ``ds``."""
    if not ds.has_confounder:
        return math.nan
    zhat = fc.infer_series(model, ds)
    return aligned_r2(zhat.reshape(-1, zhat.shape[-1]), ds.stacked("Z").ravel())


def split_sequences(n: int, seed: int, fractions=(0.7, 0.15)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded 70/15/15 split of sequence indices into train/validation/test."""
    perm = Rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


@dataclass
class ExperimentResult:
    model: str
    sl: int
    pl: int
    with_confounder: bool
    metrics: MetricReport
    seed: int
    gamma_a: float
    gamma_y: float

    def sort_key(self):
        return (self.model, self.pl, self.with_confounder, self.seed)

    def row(self) -> list[str]:
        m = self.metrics
        return [self.model, str(self.sl), str(self.pl), str(self.with_confounder).lower(),
                repr(m.mse), repr(m.mae), repr(m.rmse), repr(m.r2), str(self.seed),
                repr(float(self.gamma_a)), repr(float(self.gamma_y))]


def evaluate_forecaster(model: fc.Forecaster, factor: fm.FactorModel | None, ds: Dataset):
    """Metrics on every window of ``ds`` in standardised target units, plus window index."""
    cfg = model.cfg
    if cfg.use_confounder:
        source = getattr(model, "factor", None) or factor
        zhat = fc.infer_series(source, ds)
    else:
        zhat = None
    channels = fc.channel_series(ds, zhat, cfg.use_confounder)
    inp, tgt, index = fc.window_arrays(channels, fc.target_series(ds, cfg.target), cfg.sl, cfg.pl)
    if len(inp) == 0:
        raise InsufficientDataError("evaluation split has no complete windows")
    pred = model.predict_normalized(model.normalize_inputs(inp))
    return compute_metrics(pred, model.normalize_targets(tgt)), index


@dataclass
class GridSpec:
    archs: list[str] = field(default_factory=lambda: list(fc.ARCHS))
    pls: list[int] = field(default_factory=lambda: [12, 24, 36, 48])
    seeds: list[int] = field(default_factory=lambda: [0])
    sl: int = 48

    def validate(self, T: int | None = None) -> "GridSpec":
        if not self.archs or not self.pls or not self.seeds:
            raise ConfigError("grid needs at least one architecture, horizon and seed")
        for a in self.archs:
            if a not in fc.ARCHS:
                raise ConfigError(f"unknown architecture {a!r}; expected one of {fc.ARCHS}")
        if self.sl < 1 or min(self.pls) < 1:
            raise ConfigError("sl and every pl must be >= 1")
        if T is not None and self.sl + max(self.pls) > T:
            raise ConfigError(f"infeasible window: sl + pl = {self.sl + max(self.pls)} exceeds T = {T}")
        return self

    def size(self) -> int:
        return 2 * len(self.archs) * len(self.pls) * len(self.seeds)


@dataclass
class GridOutcome:
    results: list[ExperimentResult]
    diagnostics: dict[int, list[tuple[int, float, float]]]
    factor_test_r2: dict[int, float]
    test_windows: dict[tuple, np.ndarray]

    def summary(self) -> dict:
        return summarize(self.results, self.factor_test_r2)


def summarize(results: Iterable[ExperimentResult], factor_test_r2: dict | None = None) -> dict:
    cells: dict[tuple[str, int], dict[bool, dict[int, float]]] = {}
    for r in results:
        cells.setdefault((r.model, r.pl), {True: {}, False: {}})[r.with_confounder][r.seed] = r.metrics.mse
    rows, deltas, wins = [], [], 0
    for (model, pl), flags in sorted(cells.items()):
        med_with = float(np.median(list(flags[True].values()))) if flags[True] else math.nan
        med_without = float(np.median(list(flags[False].values()))) if flags[False] else math.nan
        win = med_with < med_without
        wins += int(win)
        for seed in sorted(set(flags[True]) & set(flags[False])):
            deltas.append(flags[True][seed] - flags[False][seed])
        rows.append({"model": model, "pl": pl, "median_mse_with": med_with,
                     "median_mse_without": med_without, "with_wins": bool(win)})
    out = {
        "cells": rows,
        "n_cells": len(rows),
        "wins": wins,
        "win_rate": wins / len(rows) if rows else math.nan,
        "mean_paired_mse_delta": float(np.mean(deltas)) if deltas else math.nan,
    }
    if factor_test_r2 is not None:
        out["factor_test_aligned_r2"] = {str(k): v for k, v in sorted(factor_test_r2.items())}
    return out


class ResultsWriter:
    """Results CSV that is valid after every appended row."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(RESULT_COLUMNS)

    def append(self, result: ExperimentResult) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(result.row())
            fh.flush()

    def finalize(self, results: list[ExperimentResult]) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            for r in sorted(results, key=ExperimentResult.sort_key):
                w.writerow(r.row())
        os.replace(tmp, self.path)


def write_diagnostics(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_COLUMNS)
        for epoch, loss, r2 in rows:
            w.writerow([epoch, repr(float(loss)), repr(float(r2))])


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train_factor_for_seed(ds: Dataset, split, factor_cfg: fm.FactorModelConfig, seed: int):
    train_idx, val_idx, test_idx = split
    train, val, test = ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)
    diag = []
    monitor = val if len(val) and val.has_confounder else None

    def on_epoch(epoch, model, loss):
        r2 = confounder_recovery(model, monitor) if monitor is not None else math.nan
        diag.append((epoch, loss, r2))

    cfg = dataclasses.replace(factor_cfg, seed=seed)
    model, _ = fm.train_factor_model(train, cfg, on_epoch=on_epoch)
    test_r2 = confounder_recovery(model, test) if len(test) else math.nan
    return model, diag, test_r2


def _run_cell(job):
    train, test, factor, cfg, meta = job
    model, _ = fc.train_forecaster(train, factor if cfg.use_confounder else None, cfg)
    metrics, index = evaluate_forecaster(model, factor, test)
    result = ExperimentResult(model=cfg.arch, sl=cfg.sl, pl=cfg.pl, with_confounder=cfg.use_confounder,
                              metrics=metrics, seed=cfg.seed, gamma_a=meta[0], gamma_y=meta[1])
    return result, index


def run_experiment_grid(
    ds: Dataset,
    grid: GridSpec,
    factor_cfg: fm.FactorModelConfig | None = None,
    forecaster_cfg: fc.ForecasterConfig | None = None,
    out_dir=None,
    workers: int = 1,
) -> GridOutcome:
    """Train one factor model per seed and a paired forecaster per (arch, pl, flag) cell.

    Members of a pair share seed, split, epochs and initial weights on the
    shared channels; only the confounder channel differs.
    """
    grid.validate(ds.T)
    factor_cfg = factor_cfg or fm.FactorModelConfig()
    forecaster_cfg = forecaster_cfg or fc.ForecasterConfig()
    if len(ds) < 3:
        raise InsufficientDataError(f"grid needs at least 3 sequences for a train/val/test split, got {len(ds)}")
    meta = (float(ds.manifest.get("gamma_a", math.nan)), float(ds.manifest.get("gamma_y", math.nan)))
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = ResultsWriter(out_dir / "results.csv") if out_dir is not None else None

    factors, diagnostics, test_r2, jobs = {}, {}, {}, []
    for seed in grid.seeds:
        split = split_sequences(len(ds), seed)
        factor, diag, r2 = train_factor_for_seed(ds, split, factor_cfg, seed)
        factors[seed], diagnostics[seed], test_r2[seed] = factor, diag, r2
        logger.info("seed %d: factor model trained, held-out aligned R^2 %.4f", seed, r2)
        if out_dir is not None:
            write_diagnostics(out_dir / f"diagnostics_seed{seed}.csv", diag)
        train, test = ds.subset(split[0]), ds.subset(split[2])
        for arch in grid.archs:
            for pl in grid.pls:
                for flag in (False, True):
                    cfg = dataclasses.replace(forecaster_cfg, arch=arch, sl=grid.sl, pl=pl, use_confounder=flag,
                                              joint_mode=forecaster_cfg.joint_mode and flag, seed=seed)
                    jobs.append((train, test, factor, cfg, meta))

    results, windows = [], {}

    def collect(result, index):
        results.append(result)
        windows[result.sort_key()] = index
        if writer is not None:
            writer.append(result)
        logger.info("%s pl=%d confounder=%s seed=%d mse=%.6f", result.model, result.pl,
                    result.with_confounder, result.seed, result.metrics.mse)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result, index in pool.map(_run_cell, jobs):
                collect(result, index)
    else:
        for job in jobs:
            collect(*_run_cell(job))

    results.sort(key=ExperimentResult.sort_key)
    outcome = GridOutcome(results, diagnostics, test_r2, windows)
    if writer is not None:
        writer.finalize(results)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(outcome.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return outcome
