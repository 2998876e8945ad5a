"""Window-to-horizon forecasters with an optional inferred-confounder channel.

Three desk-scale architectures share one contract: a window of ``sl`` rows
of ``[X, A (, Zhat)]`` maps to ``pl`` future values of the target column.
Channels and target are z-scored with constants fitted on the training data
and stored with the model; :func:`forecast` takes and returns raw units.
"""
from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import checkpoint
from . import factor_model as fm
from .errors import CheckpointError, ConfigError, InsufficientDataError, ShapeError, TrainingDivergenceError
from .numerics import OptimizerState, ParamStore, Rng, optimizer_step
from .simgen import Dataset

logger = logging.getLogger(__name__)

ARCHS = ("linear", "mlp", "attention")


@dataclass
class ForecasterConfig:
    arch: str = "linear"
    sl: int = 48
    pl: int = 12
    use_confounder: bool = False
    hidden_dim: int = 32
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    joint_mode: bool = False
    reg_lambda: float = 0.1
    seed: int = 0
    target: str = "y"
    init_scale: float = 0.1
    window_stride: int = 1

    def validate(self) -> "ForecasterConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("sl", "pl", "hidden_dim", "epochs", "batch_size", "window_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if self.reg_lambda < 0:
            raise ConfigError(f"reg_lambda must be >= 0, got {self.reg_lambda!r}")
        if self.joint_mode and not self.use_confounder:
            raise ConfigError("joint_mode requires use_confounder = true")
        if not (self.target == "y" or (self.target.startswith("x_") and self.target[2:].isdigit())):
            raise ConfigError(f"target must be 'y' or 'x_<j>', got {self.target!r}")
        return self


@dataclass
class Window:
    inputs: np.ndarray
    target: np.ndarray
    seq: int = -1
    offset: int = -1


def target_series(ds: Dataset, target: str) -> np.ndarray:
    """(n, T) array of the forecast target."""
    if target == "y":
        return ds.stacked("Y")
    j = int(target[2:])
    if j >= ds.k:
        raise ConfigError(f"target {target!r} out of range for k={ds.k}")
    return ds.stacked("X")[:, :, j]


def channel_series(ds: Dataset, zhat: np.ndarray | None, use_confounder: bool) -> np.ndarray:
    """(n, T, d) input channels ``[X, A (, Zhat)]``."""
    parts = [ds.stacked("X"), ds.stacked("A")]
    if use_confounder:
        if zhat is None:
            raise ConfigError("use_confounder is set but no inferred confounder series was provided")
        zhat = np.asarray(zhat, dtype=np.float64)
        if zhat.ndim == 2:
            zhat = zhat[..., None]
        if zhat.shape[:2] != (len(ds), ds.T):
            raise ShapeError(f"confounder series shape {zhat.shape} does not match dataset ({len(ds)}, {ds.T})")
        parts.append(zhat)
    return np.concatenate(parts, axis=-1)


def window_offsets(T: int, sl: int, pl: int) -> range:
    return range(max(0, T - sl - pl + 1))


def window_arrays(channels: np.ndarray, targets: np.ndarray, sl: int, pl: int):
    """Stacked window inputs (N, sl, d), targets (N, pl) and (seq, offset) index pairs."""
    n, T, d = channels.shape
    n_off = len(window_offsets(T, sl, pl))
    if n_off == 0 or n == 0:
        return np.zeros((0, sl, d)), np.zeros((0, pl)), np.zeros((0, 2), dtype=int)
    inp = sliding_window_view(channels[:, : n_off + sl - 1], sl, axis=1)[:, :n_off]  # (n, n_off, d, sl)
    inp = np.ascontiguousarray(inp.transpose(0, 1, 3, 2)).reshape(n * n_off, sl, d)
    tgt = sliding_window_view(targets[:, sl:], pl, axis=1)[:, :n_off].reshape(n * n_off, pl).copy()
    seq, off = np.meshgrid(np.arange(n), np.arange(n_off), indexing="ij")
    return inp, tgt, np.stack([seq.ravel(), off.ravel()], axis=1)


def make_windows(ds: Dataset, zhat, cfg: ForecasterConfig) -> list[Window]:
    cfg.validate()
    channels = channel_series(ds, zhat, cfg.use_confounder)
    inp, tgt, index = window_arrays(channels, target_series(ds, cfg.target), cfg.sl, cfg.pl)
    return [Window(inp[i], tgt[i], int(s), int(o)) for i, (s, o) in enumerate(index)]


def positional_encoding(sl: int, dim: int) -> np.ndarray:
    pos = np.arange(sl)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Forecaster:
    def __init__(self, cfg: ForecasterConfig, d: int, rng: Rng | None = None):
        cfg.validate()
        self.cfg = cfg
        self.d = d
        self.in_mean = np.zeros(d)
        self.in_std = np.ones(d)
        self.y_mean = 0.0
        self.y_std = 1.0
        rng = rng if rng is not None else Rng(cfg.seed)
        # one stream per input channel: paired models with and without the
        # confounder channel start from identical weights on shared channels
        body_rng, *channel_rngs = rng.spawn(d + 1)
        s = cfg.init_scale
        u = lambda *shape: body_rng.uniform(-s, s, size=shape)

        def per_channel(rows, cols_per_channel):
            cols = [r.uniform(-s, s, size=(rows, cols_per_channel)) for r in channel_rngs]
            return np.stack(cols, axis=-1).reshape(rows, cols_per_channel * d)

        sl, pl, H = cfg.sl, cfg.pl, cfg.hidden_dim
        p = self.params = ParamStore()
        if cfg.arch == "linear":
            p.add("out.W", per_channel(pl, sl))
            p.add("out.b", np.zeros(pl))
        elif cfg.arch == "mlp":
            p.add("hidden.W", per_channel(H, sl))
            p.add("hidden.b", np.zeros(H))
            p.add("out.W", u(pl, H))
            p.add("out.b", np.zeros(pl))
        else:
            p.add("embed.W", per_channel(H, 1))
            p.add("embed.b", np.zeros(H))
            p.add("attn.Wq", u(H, H))
            p.add("attn.Wk", u(H, H))
            p.add("attn.Wv", u(H, H))
            p.add("out.W", u(pl, H))
            p.add("out.b", np.zeros(pl))
            self._pe = positional_encoding(sl, H)

    @property
    def arch(self) -> str:
        return self.cfg.arch

    def fit_normalization(self, channels: np.ndarray, targets: np.ndarray) -> None:
        flat = channels.reshape(-1, channels.shape[-1])
        self.in_mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.in_std = np.where(std > 0, std, 1.0)
        self.y_mean = float(targets.mean())
        ys = float(targets.std())
        self.y_std = ys if ys > 0 else 1.0

    def normalize_inputs(self, inputs: np.ndarray) -> np.ndarray:
        return (inputs - self.in_mean) / self.in_std

    def normalize_targets(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    # forward/backward on standardised windows (N, sl, d)

    def forward(self, Xw: np.ndarray):
        p, arch = self.params, self.cfg.arch
        N = Xw.shape[0]
        if arch == "linear":
            flat = Xw.reshape(N, -1)
            return flat @ p["out.W"].T + p["out.b"], flat
        if arch == "mlp":
            flat = Xw.reshape(N, -1)
            h = np.tanh(flat @ p["hidden.W"].T + p["hidden.b"])
            return h @ p["out.W"].T + p["out.b"], (flat, h)
        E = Xw @ p["embed.W"].T + p["embed.b"] + self._pe
        Q, K, V = E @ p["attn.Wq"], E @ p["attn.Wk"], E @ p["attn.Wv"]
        scale = 1.0 / np.sqrt(Q.shape[-1])
        S = np.matmul(Q, K.transpose(0, 2, 1)) * scale
        S -= S.max(axis=-1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=-1, keepdims=True)
        # mean over query positions commutes with the value product
        w = P.mean(axis=1)
        pooled = np.matmul(w[:, None, :], V)[:, 0]
        return pooled @ p["out.W"].T + p["out.b"], (Xw, E, Q, K, V, P, w, pooled, scale)

    def backward(self, cache, dy: np.ndarray, need_input_grad: bool = False):
        p, arch = self.params, self.cfg.arch
        g = {"out.b": dy.sum(axis=0)}
        dX = None
        if arch == "linear":
            flat = cache
            g["out.W"] = dy.T @ flat
            if need_input_grad:
                dX = dy @ p["out.W"]
        elif arch == "mlp":
            flat, h = cache
            g["out.W"] = dy.T @ h
            dpre = (dy @ p["out.W"]) * (1.0 - h * h)
            g["hidden.W"] = dpre.T @ flat
            g["hidden.b"] = dpre.sum(axis=0)
            if need_input_grad:
                dX = dpre @ p["hidden.W"]
        else:
            Xw, E, Q, K, V, P, w, pooled, scale = cache
            N, L, H = E.shape
            g["out.W"] = dy.T @ pooled
            dpooled = dy @ p["out.W"]
            # every query row receives the same upstream gradient dpooled / L
            r = np.matmul(V, dpooled[:, :, None])[..., 0] / L
            dV = w[:, :, None] * dpooled[:, None, :]
            dS = P * (r[:, None, :] - np.matmul(P, r[:, :, None])) * scale
            dQ = np.matmul(dS, K)
            dK = np.matmul(dS.transpose(0, 2, 1), Q)
            E2 = E.reshape(-1, H)
            dQ2, dK2, dV2 = dQ.reshape(-1, H), dK.reshape(-1, H), dV.reshape(-1, H)
            g["attn.Wq"] = E2.T @ dQ2
            g["attn.Wk"] = E2.T @ dK2
            g["attn.Wv"] = E2.T @ dV2
            dE = dQ2 @ p["attn.Wq"].T + dK2 @ p["attn.Wk"].T + dV2 @ p["attn.Wv"].T
            g["embed.W"] = dE.T @ Xw.reshape(-1, Xw.shape[-1])
            g["embed.b"] = dE.sum(axis=0)
            if need_input_grad:
                dX = dE @ p["embed.W"]
        if dX is not None:
            dX = dX.reshape(dy.shape[0], self.cfg.sl, self.d)
        return g, dX

    def loss(self, Xw: np.ndarray, yw: np.ndarray, backward: bool = True) -> float:
        out, cache = self.forward(Xw)
        diff = out - yw
        loss = float(np.mean(diff * diff))
        if backward:
            grads, _ = self.backward(cache, 2.0 * diff / diff.size)
            self.params.set_grads(grads)
        return loss

    def predict_normalized(self, Xw: np.ndarray) -> np.ndarray:
        return self.forward(Xw)[0]


def _as_batch(model: Forecaster, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.shape[1:] != (model.cfg.sl, model.d):
        raise ShapeError(f"window of shape {inputs.shape[1:]} does not match model ({model.cfg.sl}, {model.d})")
    return inputs


def forecast(model: Forecaster, w: Window | np.ndarray) -> np.ndarray:
    """Forecast of length ``pl`` in raw target units."""
    inputs = w.inputs if isinstance(w, Window) else w
    out = model.predict_normalized(model.normalize_inputs(_as_batch(model, inputs)))
    return out[0] * model.y_std + model.y_mean


def forecast_batch(model: Forecaster, inputs: np.ndarray) -> np.ndarray:
    out = model.predict_normalized(model.normalize_inputs(_as_batch(model, inputs)))
    return out * model.y_std + model.y_mean


def infer_series(factor: fm.FactorModel, ds: Dataset) -> np.ndarray:
    return fm.infer_confounders_batch(factor, ds.stacked("X"), ds.stacked("A"))


def _check_divergence(loss: float, epoch: int, lr: float) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"forecaster loss non-finite at epoch {epoch} (learning rate {lr})")


# non-finite values are caught and reported as divergence, so numpy need not warn
@np.errstate(over="ignore", invalid="ignore")
def train_forecaster(
    ds: Dataset, factor: fm.FactorModel | None, cfg: ForecasterConfig
) -> tuple[Forecaster, list[float]]:
    cfg.validate()
    if cfg.use_confounder and factor is None:
        raise ConfigError("use_confounder is set but no factor model was provided")
    if cfg.joint_mode:
        return _train_joint(ds, factor, cfg)
    zhat = infer_series(factor, ds) if cfg.use_confounder else None
    channels = channel_series(ds, zhat, cfg.use_confounder)
    targets = target_series(ds, cfg.target)
    inp, tgt, index = window_arrays(channels, targets, cfg.sl, cfg.pl)
    if cfg.window_stride > 1:
        keep = index[:, 1] % cfg.window_stride == 0
        inp, tgt = inp[keep], tgt[keep]
    if len(inp) == 0:
        raise InsufficientDataError(f"no windows: T={ds.T} is shorter than sl + pl = {cfg.sl + cfg.pl}")
    init_rng, shuffle_rng = Rng(cfg.seed).spawn(2)
    model = Forecaster(cfg, channels.shape[-1], init_rng)
    model.fit_normalization(channels, targets)
    Xw = model.normalize_inputs(inp)
    yw = model.normalize_targets(tgt)
    state = OptimizerState(learning_rate=cfg.learning_rate)
    history = []
    n = len(Xw)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = model.loss(Xw[idx], yw[idx])
            _check_divergence(loss, epoch, cfg.learning_rate)
            optimizer_step(model.params, state)
            total += loss * len(idx)
        history.append(total / n)
        _check_params(model.params, epoch, cfg.learning_rate)
    return model, history


def _check_params(params: ParamStore, epoch: int, lr: float) -> None:
    try:
        params.check_finite()
    except TrainingDivergenceError as exc:
        raise TrainingDivergenceError(f"{exc} at epoch {epoch} (learning rate {lr})") from None


class JointObjective:
    """Forecast MSE plus ``reg_lambda * mean_t ||Zhat_t - Zhat_ref_t||^2``.

    ``Zhat_ref`` is the confounder series of the factor model as it was before
    joint fitting started, held fixed. Parameters of both models live in one
    store with ``factor.`` / ``forecaster.`` prefixes.
    """

    def __init__(self, factor: fm.FactorModel, model: Forecaster, ds: Dataset, cfg: ForecasterConfig):
        self.factor = factor
        self.model = model
        self.cfg = cfg
        self.Xn = factor.normalize(ds.stacked("X"))
        self.An = factor.normalize(ds.stacked("A"))
        self.base = np.concatenate([ds.stacked("X"), ds.stacked("A")], axis=-1)
        self.targets = model.normalize_targets(target_series(ds, cfg.target))
        self.z_ref = fm.confounder_forward(factor.params, fm.lagged_inputs(self.Xn, self.An))[0]
        self.n_off = len(window_offsets(ds.T, cfg.sl, cfg.pl))
        self.params = ParamStore()
        for prefix, store in (("factor.", factor.params), ("forecaster.", model.params)):
            for name in store:
                self.params.values[prefix + name] = store.values[name]
                self.params.grads[prefix + name] = store.grads[name]

    def n_windows(self) -> int:
        return self.Xn.shape[0] * self.n_off

    def loss(self, window_ids: np.ndarray | None = None, backward: bool = True) -> float:
        cfg, model, factor = self.cfg, self.model, self.factor
        if window_ids is None:
            window_ids = np.arange(self.n_windows())
        seq, off = np.divmod(window_ids, self.n_off)
        used = np.unique(seq)
        local = np.searchsorted(used, seq)
        U = fm.lagged_inputs(self.Xn[used], self.An[used])
        Z, Hs = fm.confounder_forward(factor.params, U)
        channels = np.concatenate([self.base[used], Z], axis=-1)
        steps = off[:, None] + np.arange(cfg.sl)
        Xw = model.normalize_inputs(channels[local[:, None], steps])
        yw = self.targets[used][local[:, None], off[:, None] + cfg.sl + np.arange(cfg.pl)]
        out, cache = model.forward(Xw)
        diff = out - yw
        dz = Z - self.z_ref[used]
        loss = float(np.mean(diff * diff)) + cfg.reg_lambda * float(np.mean(np.sum(dz * dz, axis=-1)))
        if backward:
            g, dX = model.backward(cache, 2.0 * diff / diff.size, need_input_grad=True)
            zd = Z.shape[-1]
            dZ = np.zeros_like(Z)
            dZw = dX[..., -zd:] / model.in_std[-zd:]
            np.add.at(dZ, (local[:, None], steps), dZw)
            dZ += cfg.reg_lambda * 2.0 * dz / (dz.shape[0] * dz.shape[1])
            fg = fm.confounder_backward(factor.params, U, Hs, dZ)
            for j in range(factor.k):
                for name in factor.head_names(j):
                    fg[name] = np.zeros_like(factor.params[name])
            grads = {"factor." + k: v for k, v in fg.items()}
            grads.update({"forecaster." + k: v for k, v in g.items()})
            self.params.set_grads(grads)
        return loss


def _train_joint(ds: Dataset, factor: fm.FactorModel, cfg: ForecasterConfig):
    factor = copy.deepcopy(factor)
    zhat = infer_series(factor, ds)
    channels = channel_series(ds, zhat, True)
    targets = target_series(ds, cfg.target)
    if len(window_offsets(ds.T, cfg.sl, cfg.pl)) == 0 or len(ds) == 0:
        raise InsufficientDataError(f"no windows: T={ds.T} is shorter than sl + pl = {cfg.sl + cfg.pl}")
    init_rng, shuffle_rng = Rng(cfg.seed).spawn(2)
    model = Forecaster(cfg, channels.shape[-1], init_rng)
    model.fit_normalization(channels, targets)
    obj = JointObjective(factor, model, ds, cfg)
    state = OptimizerState(learning_rate=cfg.learning_rate)
    history = []
    ids = np.arange(obj.n_windows())
    ids = ids[(ids % obj.n_off) % cfg.window_stride == 0]
    n = len(ids)
    for epoch in range(cfg.epochs):
        order = ids[shuffle_rng.permutation(n)]
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = obj.loss(idx)
            _check_divergence(loss, epoch, cfg.learning_rate)
            optimizer_step(obj.params, state)
            total += loss * len(idx)
        history.append(total / n)
        _check_params(obj.params, epoch, cfg.learning_rate)
    model.factor = factor
    return model, history


def save_forecaster(model: Forecaster, path) -> None:
    extra = {
        "d": model.d,
        "normalization": {
            "in_mean": model.in_mean.tolist(),
            "in_std": model.in_std.tolist(),
            "y_mean": model.y_mean,
            "y_std": model.y_std,
        },
    }
    checkpoint.save(path, kind="forecaster", arch=model.arch, config=dataclasses.asdict(model.cfg),
                    params=model.params, extra=extra)


def load_forecaster(path, arch: str | None = None) -> Forecaster:
    """Load a forecaster; ``arch`` (if given) must match the stored architecture."""
    doc = checkpoint.load(path, kind="forecaster", arch=arch)
    try:
        cfg = ForecasterConfig(**doc["config"])
        if cfg.arch != doc["arch"]:
            raise CheckpointError(f"{path}: config arch {cfg.arch!r} disagrees with header {doc['arch']!r}")
        model = Forecaster(cfg, int(doc["extra"]["d"]))
        norm = doc["extra"]["normalization"]
        in_mean = np.array(norm["in_mean"], dtype=np.float64)
        in_std = np.array(norm["in_std"], dtype=np.float64)
        y_mean, y_std = float(norm["y_mean"]), float(norm["y_std"])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"{path}: malformed forecaster checkpoint ({exc})") from None
    if in_mean.shape != (model.d,) or in_std.shape != (model.d,):
        raise CheckpointError(f"{path}: normalization constants do not match d={model.d}")
    checkpoint.restore_params(model.params, doc, path)
    model.in_mean, model.in_std, model.y_mean, model.y_std = in_mean, in_std, y_mean, y_std
    return model
