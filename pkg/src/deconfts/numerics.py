"""Numeric substrate: seeded sampling, parameter storage, Adam and gradient checks.

All arrays are float64. Models in this package implement their backward
passes by hand; :func:`grad_check` is what keeps them honest.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import EvaluationError, InvalidArgumentError, ShapeError, TrainingDivergenceError

_SEED_LIMIT = 2**64


class Rng:
    """Seeded PCG64 stream. Children are derived through ``SeedSequence.spawn``."""

    def __init__(self, seed: int, _seed_seq: np.random.SeedSequence | None = None):
        if not 0 <= int(seed) < _SEED_LIMIT:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._seed_seq = _seed_seq if _seed_seq is not None else np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seed_seq))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, _seed_seq=s) for s in self._seed_seq.spawn(n)]

    def normal(self, mean=0.0, std=1.0, size=None):
        if np.any(np.asarray(std) < 0):
            raise InvalidArgumentError(f"std must be >= 0, got {std}")
        if np.all(np.asarray(std) == 0):
            if size is None:
                return float(mean)
            return np.full(size, mean, dtype=np.float64)
        return self.generator.normal(mean, std, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def seed_rng(seed: int) -> Rng:
    return Rng(seed)


def sample_normal(rng: Rng, mean: float, std: float) -> float:
    """One draw from N(mean, std**2); ``std == 0`` returns ``mean`` exactly."""
    if std < 0:
        raise InvalidArgumentError(f"std must be >= 0, got {std}")
    if std == 0:
        return float(mean)
    return float(mean + std * rng.generator.standard_normal())


def affine(W, x, b) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError(f"affine: W{W.shape} x{x.shape} b{b.shape} do not conform")
    return W @ x + b


class ParamStore:
    """Named float64 arrays with a parallel gradient array each."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise InvalidArgumentError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def set(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.values[name].shape:
            raise ShapeError(f"parameter {name!r}: expected shape {self.values[name].shape}, got {arr.shape}")
        self.values[name][...] = arr

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != self.values[name].shape:
                raise ShapeError(f"gradient {name!r}: expected shape {self.values[name].shape}, got {g.shape}")
            self.grads[name][...] = g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_values(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self.values.items():
            out.add(name, v.copy())
        return out

    def check_finite(self) -> None:
        for name, v in self.values.items():
            if not np.all(np.isfinite(v)):
                raise TrainingDivergenceError(f"parameter {name!r} became non-finite")


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")


def optimizer_step(params: ParamStore, state: OptimizerState) -> None:
    """Apply one bias-corrected Adam update in place. Gradients are left untouched."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in params.grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params.values[name] -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


LossFn = Callable[[ParamStore], float]


def grad_errors(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per parameter between analytic and central-difference gradients.

    ``loss_fn(params)`` must return the loss and leave the analytic gradient in
    ``params.grads``. Parameter values are restored afterwards.
    """
    if eps <= 0:
        raise InvalidArgumentError(f"eps must be > 0, got {eps}")
    base = loss_fn(params)
    if not np.isfinite(base):
        raise EvaluationError(f"loss is not finite: {base}")
    analytic = {name: g.copy() for name, g in params.grads.items()}
    out = {}
    for name, value in params.values.items():
        worst = 0.0
        flat = value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn(params)
            flat[i] = orig - eps
            f_minus = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise EvaluationError(f"loss became non-finite while perturbing {name!r}[{i}]")
            num = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        out[name] = worst
    # leave the store holding the unperturbed analytic gradient
    loss_fn(params)
    return out


def grad_check(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5) -> float:
    errors = grad_errors(loss_fn, params, eps)
    return max(errors.values()) if errors else 0.0
