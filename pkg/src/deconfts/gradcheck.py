"""Finite-difference checks of every hand-written backward pass at desk shapes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import factor_model as fm
from . import forecaster as fc
from .numerics import ParamStore, Rng, grad_errors
from .simgen import SimConfig, generate_dataset

TOLERANCE = 1e-4
FAMILIES = ("factor", "linear", "mlp", "attention", "joint")


@dataclass
class GradCheckResult:
    family: str
    max_rel_error: float
    worst_param: str
    n_values: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _jitter(params: ParamStore, rng: Rng, scale: float = 0.3) -> None:
    # nonzero biases so every term of the backward pass is exercised
    for name in params:
        params.values[name] += rng.normal(0.0, scale, size=params[name].shape)


def _problem(family: str, seed: int = 0):
    rng = Rng(seed)
    ds = generate_dataset(SimConfig(n_sequences=4 if family != "factor" else 2, T=8 if family != "factor" else 6,
                                    k=2, p=2, gamma_a=0.5, gamma_y=0.5, noise_std=0.5, burn_in=0, seed=seed))
    factor = fm.FactorModel(ds.k, fm.FactorModelConfig(hidden_dim=4, init_scale=0.5), rng)
    factor.fit_normalization(ds)
    if family == "factor":
        _jitter(factor.params, rng)
        Xn, An = factor.normalize(ds.stacked("X")), factor.normalize(ds.stacked("A"))
        return factor.params, lambda p: fm.factor_loss(factor, Xn, An)
    arch = "linear" if family == "joint" else family
    cfg = fc.ForecasterConfig(arch=arch, sl=6, pl=2, hidden_dim=4, use_confounder=True, init_scale=0.5,
                              joint_mode=family == "joint", reg_lambda=0.5)
    channels = fc.channel_series(ds, fc.infer_series(factor, ds), True)
    targets = fc.target_series(ds, "y")
    model = fc.Forecaster(cfg, channels.shape[-1], rng)
    model.fit_normalization(channels, targets)
    if family == "joint":
        obj = fc.JointObjective(factor, model, ds, cfg)
        _jitter(obj.params, rng, 0.1)
        return obj.params, lambda p: obj.loss()
    _jitter(model.params, rng)
    inp, tgt, _ = fc.window_arrays(channels, targets, cfg.sl, cfg.pl)
    Xw, yw = model.normalize_inputs(inp), model.normalize_targets(tgt)
    return model.params, lambda p: model.loss(Xw, yw)


def check_family(family: str, corrupt: str | None = None, eps: float = 1e-6) -> GradCheckResult:
    """``corrupt`` names a parameter whose analytic gradient is deliberately offset."""
    params, loss_fn = _problem(family)
    if corrupt is not None:
        inner = loss_fn

        def loss_fn(p):
            value = inner(p)
            p.grads[corrupt] += 1.0
            return value

    errors = grad_errors(loss_fn, params, eps)
    worst = max(errors, key=errors.get)
    return GradCheckResult(family, errors[worst], worst, params.n_values())


def run_gradchecks(corrupt: str | None = None) -> list[GradCheckResult]:
    """Run every family. ``corrupt`` is ``family:param`` for fault injection."""
    target = tuple(corrupt.split(":", 1)) if corrupt else (None, None)
    return [check_family(f, target[1] if f == target[0] else None) for f in FAMILIES]
