"""Adam update semantics against a scalar reference implementation."""

import numpy as np
import pytest

from film_denoise.engine import EngineError, Parameter
from film_denoise.engine.optim import Adam

from oracles import ScalarAdam


def make_param(value, name="p"):
    return Parameter(np.array([value], dtype=np.float64), name=name, group="backbone")


def test_first_step_with_unit_gradient():
    p = make_param(0.0)
    opt = Adam([p])
    p.tensor.grad[...] = 1.0
    opt.step()
    expected = -0.001 / (1.0 + 1e-7)
    assert abs(p.data[0] - expected) < 1e-15


def test_zero_grad_step_is_bit_exact_noop():
    p = Parameter(np.random.default_rng(0).random((3, 3)).astype(np.float32),
                  name="w", group="backbone")
    before = p.data.tobytes()
    opt = Adam([p])
    for _ in range(5):
        opt.zero_grad()
        opt.step()
    assert p.data.tobytes() == before
    assert opt.t == 5  # the step counter still advances


def test_quadratic_descent_is_monotone():
    p = make_param(1.0)
    opt = Adam([p], lr=0.05)
    values = [abs(p.data[0])]
    for _ in range(10):
        opt.zero_grad()
        p.tensor.grad[...] = 2.0 * p.data  # d/dp of p^2
        opt.step()
        values.append(abs(p.data[0]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_matches_scalar_reference_over_noisy_steps():
    rng = np.random.default_rng(33)
    p = make_param(0.7)
    opt = Adam([p], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-7)
    ref = ScalarAdam(0.7, lr=0.01)
    for _ in range(50):
        g = float(rng.normal())
        opt.zero_grad()
        p.tensor.grad[...] = g
        opt.step()
        ref.step(g)
        assert abs(p.data[0] - ref.x) < 1e-12


def test_missing_grad_names_parameter():
    p = make_param(0.0, name="enc0.conv1.weight")
    opt = Adam([p])
    p.tensor.grad = None
    with pytest.raises(EngineError, match="enc0.conv1.weight"):
        opt.step()


def test_duplicate_names_rejected():
    a = make_param(0.0, name="w")
    b = make_param(1.0, name="w")
    with pytest.raises(ValueError, match="duplicate"):
        Adam([a, b])


def test_invalid_hyperparameters():
    p = make_param(0.0)
    with pytest.raises(ValueError):
        Adam([p], lr=0.0)
    with pytest.raises(ValueError):
        Adam([p], beta1=1.0)
    with pytest.raises(ValueError):
        Adam([])


def test_state_arrays_round_trip():
    p = make_param(0.5)
    opt = Adam([p])
    p.tensor.grad[...] = 0.3
    opt.step()
    state = {k: v.copy() for k, v in opt.state_arrays().items()}

    fresh = Adam([make_param(0.5)])
    fresh.load_state_arrays(state, t=opt.t)
    assert fresh.t == 1
    for key, arr in fresh.state_arrays().items():
        assert np.array_equal(arr, state[key])


def test_load_state_rejects_bad_shape():
    opt = Adam([make_param(0.5)])
    with pytest.raises(ValueError, match="shape"):
        opt.load_state_arrays({"p.m": np.zeros(2), "p.v": np.zeros(2)}, t=1)
    with pytest.raises(KeyError):
        opt.load_state_arrays({"p.m": np.zeros(1)}, t=1)
