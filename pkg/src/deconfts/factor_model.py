"""Recurrent factor model inferring a substitute confounder from history.

The cell sees ``u_t = [X_{t-1}, A_{t-1}]`` (zeros at ``t = 0``), so the
confounder estimate at step ``t`` never depends on step ``t`` or later.
Each treatment dimension ``j`` has its own affine head on ``[Z_t, X_t]``.

Inputs are standardised with one shared shift/scale for X and A (they live
in the same units), which keeps the treatment equation linear in the
standardised space.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import checkpoint
from .errors import ConfigError, InsufficientDataError, ShapeError, TrainingDivergenceError
from .numerics import OptimizerState, ParamStore, Rng, optimizer_step
from .simgen import Dataset, Trajectory

logger = logging.getLogger(__name__)


@dataclass
class FactorModelConfig:
    hidden_dim: int = 16
    z_dim: int = 1
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    init_scale: float = 0.1

    def validate(self) -> "FactorModelConfig":
        for name in ("hidden_dim", "z_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        for name in ("learning_rate", "init_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        return self


class FactorModel:
    def __init__(self, k: int, cfg: FactorModelConfig, rng: Rng | None = None):
        cfg.validate()
        self.k = k
        self.cfg = cfg
        self.shift = 0.0
        self.scale = 1.0
        H, zd = cfg.hidden_dim, cfg.z_dim
        rng = rng if rng is not None else Rng(cfg.seed)
        u = lambda *shape: rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
        self.params = ParamStore()
        self.params.add("cell.W_u", u(H, 2 * k))
        self.params.add("cell.W_h", u(H, H))
        self.params.add("cell.b", np.zeros(H))
        self.params.add("proj.W", u(zd, H))
        self.params.add("proj.b", np.zeros(zd))
        for j in range(k):
            self.params.add(f"head{j}.w", u(zd + k))
            self.params.add(f"head{j}.b", np.zeros(1))

    @property
    def z_dim(self) -> int:
        return self.cfg.z_dim

    def head_names(self, j: int) -> list[str]:
        return [f"head{j}.w", f"head{j}.b"]

    def normalize(self, v: np.ndarray) -> np.ndarray:
        return (v - self.shift) / self.scale

    def fit_normalization(self, ds: Dataset) -> None:
        pooled = np.concatenate([ds.stacked("X").ravel(), ds.stacked("A").ravel()])
        self.shift = float(pooled.mean())
        std = float(pooled.std())
        self.scale = std if std > 0 else 1.0


# -- batched building blocks, arrays shaped (B, T, ...) in standardised units --

def lagged_inputs(Xn: np.ndarray, An: np.ndarray) -> np.ndarray:
    B, T, k = Xn.shape
    U = np.zeros((B, T, 2 * k))
    U[:, 1:, :k] = Xn[:, :-1]
    U[:, 1:, k:] = An[:, :-1]
    return U


def confounder_forward(params: ParamStore, U: np.ndarray):
    W_u, W_h, b = params["cell.W_u"], params["cell.W_h"], params["cell.b"]
    B, T, _ = U.shape
    H = np.empty((B, T, W_h.shape[0]))
    pre_in = U @ W_u.T + b
    h = np.zeros((B, W_h.shape[0]))
    for t in range(T):
        h = np.tanh(pre_in[:, t] + h @ W_h.T)
        H[:, t] = h
    Zhat = H @ params["proj.W"].T + params["proj.b"]
    return Zhat, H


def confounder_backward(params: ParamStore, U: np.ndarray, H: np.ndarray, dZhat: np.ndarray) -> dict:
    W_h = params["cell.W_h"]
    B, T, _ = U.shape
    grads = {
        "proj.W": np.einsum("btz,bth->zh", dZhat, H),
        "proj.b": dZhat.sum(axis=(0, 1)),
    }
    dH = dZhat @ params["proj.W"]
    dpre = np.empty_like(H)
    dh_next = np.zeros((B, W_h.shape[0]))
    for t in range(T - 1, -1, -1):
        h = H[:, t]
        d = (dH[:, t] + dh_next) * (1.0 - h * h)
        dpre[:, t] = d
        dh_next = d @ W_h
    H_prev = np.zeros_like(H)
    H_prev[:, 1:] = H[:, :-1]
    grads["cell.W_u"] = np.einsum("bth,btu->hu", dpre, U)
    grads["cell.W_h"] = np.einsum("bth,btg->hg", dpre, H_prev)
    grads["cell.b"] = dpre.sum(axis=(0, 1))
    return grads


def heads_forward(params: ParamStore, k: int, Zhat: np.ndarray, Xn: np.ndarray):
    C = np.concatenate([Zhat, Xn], axis=-1)
    W = np.stack([params[f"head{j}.w"] for j in range(k)])
    b = np.concatenate([params[f"head{j}.b"] for j in range(k)])
    return C @ W.T + b, C, W


def factor_loss(model: FactorModel, Xn: np.ndarray, An: np.ndarray, backward: bool = True) -> float:
    """Mean squared treatment reconstruction error; fills ``model.params.grads``."""
    params, k, zd = model.params, model.k, model.z_dim
    U = lagged_inputs(Xn, An)
    Zhat, H = confounder_forward(params, U)
    Ahat, C, W = heads_forward(params, k, Zhat, Xn)
    diff = Ahat - An
    loss = float(np.mean(diff * diff))
    if backward:
        dA = 2.0 * diff / diff.size
        grads = {}
        for j in range(k):
            grads[f"head{j}.w"] = np.einsum("bt,btc->c", dA[..., j], C)
            grads[f"head{j}.b"] = np.array([dA[..., j].sum()])
        dZhat = (dA @ W)[..., :zd]
        grads.update(confounder_backward(params, U, H, dZhat))
        params.set_grads(grads)
    return loss


# -- public operations on raw-unit trajectories --

def _check_k(model: FactorModel, k: int) -> None:
    if k != model.k:
        raise ShapeError(f"trajectory has k={k}, model expects k={model.k}")


def infer_confounders_batch(model: FactorModel, X: np.ndarray, A: np.ndarray) -> np.ndarray:
    _check_k(model, X.shape[-1])
    U = lagged_inputs(model.normalize(X), model.normalize(A))
    return confounder_forward(model.params, U)[0]


def infer_confounders(model: FactorModel, traj: Trajectory) -> np.ndarray:
    """Inferred confounder, shape (T, z_dim)."""
    if traj.T < 1:
        raise ShapeError("trajectory must have T >= 1")
    return infer_confounders_batch(model, traj.X[None], traj.A[None])[0]


def predict_treatments(model: FactorModel, Zhat: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Per-head treatment predictions in raw units. Observed treatments are not an input."""
    Zhat = np.asarray(Zhat, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or Zhat.ndim != 2 or Zhat.shape != (X.shape[0], model.z_dim):
        raise ShapeError(f"Zhat{Zhat.shape} and X{X.shape} do not conform to z_dim={model.z_dim}")
    _check_k(model, X.shape[1])
    Ahat, _, _ = heads_forward(model.params, model.k, Zhat[None], model.normalize(X)[None])
    return Ahat[0] * model.scale + model.shift


# non-finite values are caught and reported as divergence, so numpy need not warn
@np.errstate(over="ignore", invalid="ignore")
def train_factor_model(
    ds: Dataset,
    cfg: FactorModelConfig,
    on_epoch: Callable[[int, FactorModel, float], None] | None = None,
) -> tuple[FactorModel, list[float]]:
    cfg.validate()
    if len(ds) == 0:
        raise InsufficientDataError("cannot train a factor model on an empty dataset")
    init_rng, shuffle_rng = Rng(cfg.seed).spawn(2)
    model = FactorModel(ds.k, cfg, init_rng)
    model.fit_normalization(ds)
    Xn = model.normalize(ds.stacked("X"))
    An = model.normalize(ds.stacked("A"))
    n = len(ds)
    state = OptimizerState(learning_rate=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = factor_loss(model, Xn[idx], An[idx])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"factor model loss non-finite at epoch {epoch} (learning rate {cfg.learning_rate})"
                )
            optimizer_step(model.params, state)
            total += loss * len(idx)
        history.append(total / n)
        try:
            model.params.check_finite()
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"{exc} at epoch {epoch} (learning rate {cfg.learning_rate})") from None
        if on_epoch is not None:
            on_epoch(epoch, model, history[-1])
        logger.debug("factor epoch %d loss %.6g", epoch, history[-1])
    return model, history


def treatment_residuals(model: FactorModel, ds: Dataset, zero_confounder: bool = False) -> np.ndarray:
    """Pooled ``A - Ahat`` over all sequences and steps, shape (n*T, k)."""
    X, A = ds.stacked("X"), ds.stacked("A")
    Zhat = infer_confounders_batch(model, X, A)
    if zero_confounder:
        Zhat = np.zeros_like(Zhat)
    Ahat, _, _ = heads_forward(model.params, model.k, Zhat, model.normalize(X))
    Ahat = Ahat * model.scale + model.shift
    return (A - Ahat).reshape(-1, model.k)


def correlation_matrix(R: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns of ``R``; zero-variance columns get 0 rows/cols."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 3:
        raise InsufficientDataError(f"need at least 3 pooled samples, got {R.shape[0] if R.ndim == 2 else R.size}")
    C = R - R.mean(axis=0)
    sd = np.sqrt((C * C).sum(axis=0))
    ok = sd > 0
    out = np.zeros((R.shape[1], R.shape[1]))
    if ok.any():
        Cn = C[:, ok] / sd[ok]
        out[np.ix_(ok, ok)] = np.clip(Cn.T @ Cn, -1.0, 1.0)
        out[np.diag_indices_from(out)] = ok.astype(np.float64)
    return out


def residual_cross_correlation(model: FactorModel, ds: Dataset, zero_confounder: bool = False) -> np.ndarray:
    return correlation_matrix(treatment_residuals(model, ds, zero_confounder))


def max_offdiag(C: np.ndarray) -> float:
    if C.shape[0] < 2:
        return 0.0
    return float(np.max(np.abs(C[~np.eye(C.shape[0], dtype=bool)])))


def save_factor_model(model: FactorModel, path) -> None:
    checkpoint.save(
        path,
        kind="factor_model",
        arch="rnn",
        config=dataclasses.asdict(model.cfg),
        params=model.params,
        extra={"k": model.k, "normalization": {"shift": model.shift, "scale": model.scale}},
    )


def load_factor_model(path) -> FactorModel:
    doc = checkpoint.load(path, kind="factor_model", arch="rnn")
    try:
        cfg = FactorModelConfig(**doc["config"])
        model = FactorModel(int(doc["extra"]["k"]), cfg)
        norm = doc["extra"]["normalization"]
        model.shift, model.scale = float(norm["shift"]), float(norm["scale"])
    except (KeyError, TypeError) as exc:
        raise checkpoint.CheckpointError(f"{path}: malformed factor model checkpoint ({exc})") from None
    checkpoint.restore_params(model.params, doc, path)
    return model
