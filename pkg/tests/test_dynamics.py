import math

import numpy as np
import pytest

from lyapctl.dynamics import (
    available_models,
    estimate_constants,
    get_model,
    linearize,
    steady_state,
    step,
    step_batch,
)
from lyapctl.exceptions import NumericOverflowError, ReferenceInadmissibleError

from oracles import pendulum_delta_scan, pendulum_step


@pytest.fixture(scope="module")
def pend():
    return get_model("pendulum")


@pytest.mark.parametrize(
    "x,u,expected",
    [
        ([0.0, 0.0], 0.0, [0.0, 0.0]),
        ([0.0, 1.0], 0.0, [0.1, 1.0]),
        ([math.pi / 2, 0.0], 0.0, [math.pi / 2, 0.981]),
    ],
)
def test_pendulum_step_examples(pend, x, u, expected):
    assert np.allclose(step(pend, x, [u]), expected, atol=1e-12)


def test_pendulum_step_matches_hand_evaluation(pend):
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.uniform(-5, 5, 2)
        u = rng.uniform(-10, 10)
        assert np.allclose(step(pend, x, [u]), pendulum_step(x, u), rtol=0, atol=1e-13)


def test_step_overflow_reports_state(pend):
    with pytest.raises(NumericOverflowError) as info:
        step(pend, [0.0, 1.7e308], [1e308])
    assert info.value.state.shape == (2,)


def test_step_batch_matches_rows():
    for mid in ("pendulum", "drone-x", "drone"):
        model = get_model(mid)
        rng = np.random.default_rng(0)
        X = rng.uniform(model.lower, model.upper, size=(20, model.n))
        U = rng.standard_normal((20, model.p))
        rows = np.array([step(model, x, u) for x, u in zip(X, U)])
        assert np.allclose(step_batch(model, X, U), rows, atol=1e-14)


@pytest.mark.parametrize(
    "x_ref,A",
    [
        ([0.0, 0.0], [[1.0, 0.1], [0.981, 1.0]]),
        ([math.pi, 0.0], [[1.0, 0.1], [-0.981, 1.0]]),
    ],
)
def test_pendulum_linearization(pend, x_ref, A):
    lin = linearize(pend, x_ref)
    assert np.allclose(lin.A, A, atol=1e-12)
    assert np.allclose(lin.B, [[0.0], [0.1]])


def test_numeric_jacobian_agrees_with_analytic(pend):
    numeric = get_model("pendulum")
    object.__setattr__(numeric, "analytic_jacobian", None)
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.uniform(-5, 5, 2)
        assert np.allclose(linearize(numeric, x).A, linearize(pend, x).A, atol=1e-6)


def test_drone_linearization_is_constant():
    model = get_model("drone-x")
    a = linearize(model, [0.1, 0.2])
    b = linearize(model, [-0.4, 0.9])
    assert np.array_equal(a.A, b.A) and np.array_equal(a.B, b.B)
    assert np.allclose(a.A, [[1.0, 0.1], [0.0, 1 - 0.00527]])
    assert np.allclose(a.B, [[0.0], [-0.54779]])


@pytest.mark.parametrize("r,x_bar,u_bar", [(0.0, [0, 0], 0.0), (0.5, [0.5, 0], -9.81 * math.sin(0.5))])
def test_pendulum_steady_state(pend, r, x_bar, u_bar):
    ss = steady_state(pend, [r])
    assert np.allclose(ss.x_bar, x_bar, atol=1e-12)
    assert ss.u_bar[0] == pytest.approx(u_bar, abs=1e-9)
    assert np.linalg.norm(ss.x_bar - step(pend, ss.x_bar, ss.u_bar)) <= 1e-9


def test_steady_state_by_newton_without_closed_form():
    model = get_model("pendulum")
    object.__setattr__(model, "analytic_steady_state", None)
    ss = steady_state(model, [0.5])
    assert ss.u_bar[0] == pytest.approx(-9.81 * math.sin(0.5), abs=1e-9)
    assert np.linalg.norm(ss.x_bar - step(model, ss.x_bar, ss.u_bar)) <= 1e-9


def test_drone_steady_states():
    assert np.allclose(steady_state(get_model("drone-x"), [0.0]).x_bar, [0, 0])
    ss = steady_state(get_model("drone-z"), [1.5])
    assert np.allclose(ss.x_bar, [1.5, 0.0]) and abs(ss.u_bar[0]) < 1e-12


def test_inadmissible_reference():
    with pytest.raises(ReferenceInadmissibleError):
        steady_state(get_model("pendulum"), [50.0])


def test_pendulum_delta_against_scan(pend):
    consts = estimate_constants(pend, grid_density=201, random_pairs=500)
    # the grid includes x1 = +-pi only approximately; the scan oracle is the reference
    assert consts.delta == pytest.approx(pendulum_delta_scan(), abs=1e-3)
    assert consts.delta == pytest.approx(0.981 * math.pi, abs=1e-3)
    assert consts.mu_g == 0.0


@pytest.mark.parametrize("mid", ["pendulum-linearized", "drone-x", "drone-y", "drone-z", "scalar"])
def test_linear_models_have_zero_delta(mid):
    consts = estimate_constants(get_model(mid), grid_density=11, random_pairs=100)
    assert consts.delta == pytest.approx(0.0, abs=1e-12)
    assert consts.mu_g == 0.0


def test_delta_monotone_in_grid_density(pend):
    # density 11 is a subgrid of density 21 (both include the endpoints)
    coarse = estimate_constants(pend, grid_density=11, random_pairs=10).delta
    dense = estimate_constants(pend, grid_density=21, random_pairs=10).delta
    assert dense >= coarse


def test_registry():
    assert {"pendulum", "pendulum-linearized", "drone-x", "drone-y", "drone-z"} <= set(available_models())
    with pytest.raises(KeyError):
        get_model("cartpole")
    assert get_model("pendulum", gravity=9.8).params["gravity"] == 9.8
