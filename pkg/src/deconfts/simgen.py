"""Synthetic confounded behaviour data with a known hidden confounder.

Per step ``t`` (history before the first step is zero)::

    X_t   = A_{t-1} + eta_t                                  eta ~ N(0, s^2) per dim
    Z_t   = 1/p * sum_i (lambda_i * mean_j A_{t-i,j} + beta_i * Z_{t-i}) + eps_t
    A_t,j = gamma_a * Z_t + (1 - gamma_a) * X_t,j
    Y_t   = gamma_y * Z_t + (1 - gamma_y) * mean_j X_{t+1,j}

``Y`` at row ``t`` is the outcome produced by step ``t``, so one extra
covariate step is simulated past the end of every sequence.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetInvariantError, ParseError
from .numerics import Rng, seed_rng

SCHEMA_VERSION = "1"
GENERATOR_VERSION = "deconfts-simgen/1"


@dataclass
class SimConfig:
    n_sequences: int = 100
    T: int = 60
    k: int = 3
    p: int = 5
    gamma_a: float = 0.5
    gamma_y: float = 0.5
    noise_std: float = 0.001
    burn_in: int = 20
    seed: int = 0

    def validate(self) -> "SimConfig":
        checks = [
            ("n_sequences", self.n_sequences >= 0, ">= 0"),
            ("T", self.T >= 1, ">= 1"),
            ("k", self.k >= 1, ">= 1"),
            ("p", self.p >= 1, ">= 1"),
            ("gamma_a", 0.0 <= self.gamma_a <= 1.0, "in [0, 1]"),
            ("gamma_y", 0.0 <= self.gamma_y <= 1.0, "in [0, 1]"),
            ("noise_std", self.noise_std >= 0.0, ">= 0"),
            ("burn_in", self.burn_in >= 0, ">= 0"),
            ("seed", 0 <= self.seed < 2**64, "a 64-bit unsigned integer"),
        ]
        for name, ok, bound in checks:
            if not ok:
                raise ConfigError(f"{name} must be {bound}, got {getattr(self, name)!r}")
        return self


@dataclass
class Coefficients:
    lam: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.lam.shape != self.beta.shape or self.lam.ndim != 1:
            raise DatasetInvariantError(f"lambda{self.lam.shape} and beta{self.beta.shape} must both have length p")

    @property
    def p(self) -> int:
        return len(self.lam)


@dataclass
class Trajectory:
    """One sequence. ``Z`` is ``None`` when the confounder is unobserved."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    Z: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Z is not None:
            self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.X.ndim != 2 or self.A.shape != self.X.shape:
            raise DatasetInvariantError(f"X{self.X.shape} and A{self.A.shape} must be matching T x k arrays")
        T = self.X.shape[0]
        if self.Y.shape != (T,) or (self.Z is not None and self.Z.shape != (T,)):
            raise DatasetInvariantError(f"Y and Z must have length T={T}")
        for name in ("X", "A", "Y", "Z"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DatasetInvariantError(f"{name} contains non-finite values")

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {(tr.T, tr.k) for tr in self.trajectories}
        if len(shapes) > 1:
            raise DatasetInvariantError(f"trajectories have mixed (T, k): {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def T(self) -> int:
        return self.trajectories[0].T if self.trajectories else int(self.manifest.get("T", 0))

    @property
    def k(self) -> int:
        return self.trajectories[0].k if self.trajectories else int(self.manifest.get("k", 0))

    @property
    def has_confounder(self) -> bool:
        return bool(self.trajectories) and all(tr.Z is not None for tr in self.trajectories)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.trajectories[i] for i in indices], dict(self.manifest))

    def stacked(self, name: str) -> np.ndarray:
        """Array of shape (n, T, ...) for attribute ``name`` of every trajectory."""
        return np.stack([getattr(tr, name) for tr in self.trajectories])


def draw_coefficients(cfg: SimConfig, rng: Rng) -> Coefficients:
    cfg.validate()
    p = cfg.p
    lam = rng.normal(0.0, 0.5, size=p)
    i = np.arange(1, p + 1)
    beta = rng.normal(1.0 - i / p, 1.0 / p, size=p)
    return Coefficients(lam, beta)


def simulate_sequence(cfg: SimConfig, coeffs: Coefficients, rng: Rng) -> Trajectory:
    cfg.validate()
    p, k = cfg.p, cfg.k
    if coeffs.p != p:
        raise ConfigError(f"coefficients have p={coeffs.p}, config has p={p}")
    n_steps = cfg.burn_in + cfg.T
    # leading p rows hold the zero history before the first step
    A = np.zeros((p + n_steps, k))
    Z = np.zeros(p + n_steps)
    X = np.zeros((p + n_steps + 1, k))
    lam_rev = coeffs.lam[::-1]
    beta_rev = coeffs.beta[::-1]
    ga, s = cfg.gamma_a, cfg.noise_std
    for t in range(p, p + n_steps):
        X[t] = A[t - 1] + rng.normal(0.0, s, size=k)
        a_bar = A[t - p:t].mean(axis=1)
        Z[t] = (lam_rev @ a_bar + beta_rev @ Z[t - p:t]) / p + rng.normal(0.0, s)
        A[t] = ga * Z[t] + (1.0 - ga) * X[t]
    X[p + n_steps] = A[p + n_steps - 1] + rng.normal(0.0, s, size=k)

    keep = slice(p + cfg.burn_in, p + n_steps)
    X_next = X[p + cfg.burn_in + 1:p + n_steps + 1]
    Y = cfg.gamma_y * Z[keep] + (1.0 - cfg.gamma_y) * X_next.mean(axis=1)
    return Trajectory(X=X[keep].copy(), A=A[keep].copy(), Y=Y, Z=Z[keep].copy())


def sim_manifest(cfg: SimConfig, coeffs: Coefficients | None = None) -> dict:
    out = {"schema_version": SCHEMA_VERSION, "generator": GENERATOR_VERSION, "source": "simulation"}
    out.update(dataclasses.asdict(cfg))
    if coeffs is not None:
        out["lambda"] = coeffs.lam.tolist()
        out["beta"] = coeffs.beta.tolist()
    return out


def generate_dataset(cfg: SimConfig) -> Dataset:
    cfg.validate()
    coeff_rng, *seq_rngs = seed_rng(cfg.seed).spawn(cfg.n_sequences + 1)
    coeffs = draw_coefficients(cfg, coeff_rng)
    trajectories = [simulate_sequence(cfg, coeffs, r) for r in seq_rngs]
    ds = Dataset(trajectories, sim_manifest(cfg, coeffs))
    ds.manifest.update(T=cfg.T, k=cfg.k)
    return ds


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def _header(k: int) -> list[str]:
    return ["seq_id", "t", *[f"x_{j}" for j in range(k)], *[f"a_{j}" for j in range(k)], "z", "y"]


def write_dataset(ds: Dataset, path) -> None:
    """CSV with one row per (sequence, t) plus a JSON manifest sidecar.

    Row ``t`` holds ``y`` generated by step ``t`` (i.e. the outcome one step ahead).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = ds.k
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(k))
        for sid, tr in enumerate(ds.trajectories):
            for t in range(tr.T):
                z = "" if tr.Z is None else repr(float(tr.Z[t]))
                w.writerow([sid, t, *map(repr, tr.X[t].tolist()), *map(repr, tr.A[t].tolist()), z, repr(float(tr.Y[t]))])
    manifest = dict(ds.manifest)
    manifest.setdefault("schema_version", SCHEMA_VERSION)
    manifest.update(T=ds.T, k=k, n_sequences=len(ds))
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _float(value: str, path, line: int, column: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise ParseError(f"cannot parse {value!r} as a number", path, line, column) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {value!r}", path, line, column)
    return v


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", path, 1) from None
        header = [h.strip() for h in header]
        x_cols = sorted((h for h in header if h.startswith("x_")), key=lambda h: int(h[2:]))
        k = len(x_cols)
        required = _header(max(k, 1))
        for col in required:
            if col not in header:
                raise ParseError("missing required column", path, 1, col)
        idx = {h: i for i, h in enumerate(header)}
        a_cols = [f"a_{j}" for j in range(k)]
        seqs: dict[int, dict] = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line)
            try:
                sid = int(row[idx["seq_id"]])
            except ValueError:
                raise ParseError(f"bad seq_id {row[idx['seq_id']]!r}", path, line, "seq_id") from None
            try:
                t = int(row[idx["t"]])
            except ValueError:
                raise ParseError(f"bad t {row[idx['t']]!r}", path, line, "t") from None
            # trailing empty x/a cells mean the sequence has fewer dimensions
            xs = [row[idx[c]].strip() for c in x_cols]
            as_ = [row[idx[c]].strip() for c in a_cols]
            k_row = sum(1 for v in xs if v != "")
            for j, (xv, av) in enumerate(zip(xs, as_)):
                present = j < k_row
                if (xv != "") != present:
                    raise ParseError("empty value inside covariate block", path, line, x_cols[j])
                if (av != "") != present:
                    raise ParseError("covariate/treatment dimension mismatch", path, line, a_cols[j])
            if k_row == 0:
                raise ParseError("row has no covariates", path, line, x_cols[0] if x_cols else "x_0")
            x = [_float(v, path, line, x_cols[j]) for j, v in enumerate(xs[:k_row])]
            a = [_float(v, path, line, a_cols[j]) for j, v in enumerate(as_[:k_row])]
            zs = row[idx["z"]].strip()
            z = None if zs == "" else _float(zs, path, line, "z")
            y = _float(row[idx["y"]].strip(), path, line, "y")
            rec = seqs.setdefault(sid, {"t": [], "x": [], "a": [], "z": [], "y": [], "line": line})
            if t != len(rec["t"]):
                raise ParseError(f"expected t={len(rec['t'])} for sequence {sid}, got {t}", path, line, "t")
            if rec["x"] and len(rec["x"][0]) != k_row:
                raise DatasetInvariantError(f"{path}: sequence {sid} changes dimension at line {line}")
            rec["t"].append(t)
            rec["x"].append(x)
            rec["a"].append(a)
            rec["z"].append(z)
            rec["y"].append(y)

    trajectories = []
    for sid in sorted(seqs):
        rec = seqs[sid]
        zs = rec["z"]
        if all(v is None for v in zs):
            Z = None
        elif any(v is None for v in zs):
            raise ParseError(f"sequence {sid} has a partially empty z column", path, rec["line"], "z")
        else:
            Z = np.array(zs)
        dims = {len(v) for v in rec["x"]}
        if len(trajectories) and (len(rec["t"]), dims.pop()) != (trajectories[0].T, trajectories[0].k):
            raise DatasetInvariantError(
                f"{path}: sequence {sid} has shape ({len(rec['t'])}, {len(rec['x'][0])}), "
                f"expected ({trajectories[0].T}, {trajectories[0].k})"
            )
        trajectories.append(Trajectory(X=np.array(rec["x"]), A=np.array(rec["a"]), Y=np.array(rec["y"]), Z=Z))

    mpath = manifest_path(path)
    manifest = {}
    if mpath.exists():
        with open(mpath) as fh:
            manifest = json.load(fh)
    if not trajectories:
        manifest.setdefault("k", k)
    return Dataset(trajectories, manifest)
