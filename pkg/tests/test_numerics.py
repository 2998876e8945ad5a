import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deconfts.errors import EvaluationError, InvalidArgumentError, ShapeError, TrainingDivergenceError
from deconfts.numerics import (OptimizerState, ParamStore, affine, grad_check, grad_errors, optimizer_step,
                               sample_normal, seed_rng)


def test_same_seed_same_stream():
    a, b = seed_rng(42), seed_rng(42)
    assert [sample_normal(a, 0, 1) for _ in range(100)] == [sample_normal(b, 0, 1) for _ in range(100)]


def test_different_seeds_differ():
    a, b = seed_rng(42), seed_rng(43)
    assert [sample_normal(a, 0, 1) for _ in range(10)] != [sample_normal(b, 0, 1) for _ in range(10)]


def test_standard_normal_mean():
    draws = seed_rng(0).normal(0.0, 1.0, size=100_000)
    assert abs(draws.mean()) < 0.02


def test_seed_bounds():
    with pytest.raises(InvalidArgumentError):
        seed_rng(-1)
    with pytest.raises(InvalidArgumentError):
        seed_rng(2**64)
    seed_rng(2**64 - 1)


def test_zero_std_returns_mean_exactly():
    rng = seed_rng(1)
    assert sample_normal(rng, 5.0, 0.0) == 5.0
    assert np.all(rng.normal(0.25, 0.0, size=7) == 0.25)


def test_negative_std_rejected():
    with pytest.raises(InvalidArgumentError):
        sample_normal(seed_rng(1), 0.0, -1e-9)


def test_sample_variance():
    rng = seed_rng(3)
    draws = np.array([sample_normal(rng, 0.0, 0.5) for _ in range(100_000)])
    assert abs(draws.var() - 0.25) < 0.01


def test_beta_mean_p4_i2():
    p, i = 4, 2
    rng = seed_rng(4)
    draws = np.array([sample_normal(rng, 1 - i / p, 1 / p) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.005


@pytest.mark.parametrize(
    "W, x, b, expected",
    [
        (np.eye(2), [3, -1], [0, 0], [3, -1]),
        (np.zeros((2, 2)), [7.5, -2], [1, 2], [1, 2]),
        ([[1, 2], [3, 4]], [1, 1], [0, 0], [3, 7]),
    ],
)
def test_affine(W, x, b, expected):
    assert affine(W, x, b).tolist() == expected


def test_affine_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
        affine(np.zeros((2, 3)), np.zeros(2), np.zeros(2))


def _store(**values):
    p = ParamStore()
    for k, v in values.items():
        p.add(k, v)
    return p


def test_param_store_grad_shapes():
    p = _store(W=np.ones((3, 2)), b=np.zeros(3))
    assert all(p.grads[n].shape == p[n].shape for n in p)
    with pytest.raises(ShapeError):
        p.set_grads({"W": np.zeros(3)})


def test_zero_gradient_is_fixed_point():
    p = _store(w=[1.0, -2.0])
    state = OptimizerState()
    optimizer_step(p, state)
    assert p["w"].tolist() == [1.0, -2.0]
    assert state.step == 1


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_first_step_magnitude(g):
    p = _store(w=[0.0])
    p.grads["w"][:] = g
    state = OptimizerState(learning_rate=0.1)
    optimizer_step(p, state)
    expected = -0.1 * g / (abs(g) + state.eps)
    assert p["w"][0] == pytest.approx(expected, rel=1e-12)
    assert p.grads["w"][0] == g


def test_adam_minimises_square():
    p = _store(w=[1.0])
    state = OptimizerState(learning_rate=0.1)
    for _ in range(100):
        p.grads["w"][:] = 2 * p["w"]
        optimizer_step(p, state)
    assert abs(p["w"][0]) < 0.1
    assert state.step == 100


def test_non_finite_gradient_named():
    p = _store(good=[1.0], bad=[1.0])
    p.grads["bad"][:] = np.nan
    state = OptimizerState()
    with pytest.raises(TrainingDivergenceError, match="bad"):
        optimizer_step(p, state)
    assert state.step == 0


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_descent_on_positive_definite_quadratic(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    Q = M @ M.T + 0.1 * np.eye(n)
    x0 = rng.standard_normal(n) + 0.5
    p = _store(x=x0)
    f = lambda x: 0.5 * x @ Q @ x
    state = OptimizerState()
    for _ in range(200):
        p.grads["x"][:] = Q @ p["x"]
        optimizer_step(p, state)
    assert f(p["x"]) < f(x0)


def test_grad_check_square():
    p = _store(w=[3.0])

    def loss(ps):
        ps.grads["w"][:] = 2 * ps["w"]
        return float(ps["w"][0] ** 2)

    assert grad_check(loss, p, eps=1e-4) < 1e-6
    assert p["w"][0] == 3.0


def test_grad_check_linear():
    p = _store(w=[0.7, -1.3])
    c = np.array([2.5, -4.0])

    def loss(ps):
        ps.grads["w"][:] = c
        return float(c @ ps["w"])

    assert grad_check(loss, p, eps=1e-4) < 1e-9


def test_grad_check_detects_wrong_gradient():
    p = _store(w=[1.0, 2.0])

    def loss(ps):
        ps.grads["w"][:] = ps["w"]  # should be 2 * w
        return float(ps["w"] @ ps["w"])

    errors = grad_errors(loss, p, 1e-5)
    assert errors["w"] == pytest.approx(0.5, rel=1e-6)


def test_grad_check_non_finite_loss():
    p = _store(w=[1.0])
    with pytest.raises(EvaluationError):
        grad_check(lambda ps: float("nan"), p)
