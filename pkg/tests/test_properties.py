"""Property-based checks of the invariants each module promises."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyapctl import closed_loop, dataset, dynamics, mlp, roa
from lyapctl.solver import LyapunovMatrix, SolverConfig, decrease_residual, lqr_one_step, solve, solve_fixed_P

MODELS = dynamics.available_models()
unit = st.floats(-1.0, 1.0, allow_nan=False)


def _in_box(model, frac):
    return model.lower + (np.asarray(frac) + 1.0) / 2.0 * (model.upper - model.lower)


# Hessian-norm bounds of f over each box: only the pendulum is curved (|d2/dx1^2 dt g sin x1| <= dt g)
CURVATURE = {"pendulum": 0.981}


@pytest.mark.parametrize("mid", MODELS)
@given(data=st.data())
def test_step_is_affine_in_input(mid, data):
    model = dynamics.get_model(mid)
    x = _in_box(model, data.draw(st.lists(unit, min_size=model.n, max_size=model.n)))
    u1 = np.array(data.draw(st.lists(st.floats(-20, 20), min_size=model.p, max_size=model.p)))
    u2 = np.array(data.draw(st.lists(st.floats(-20, 20), min_size=model.p, max_size=model.p)))
    lhs = dynamics.step(model, x, u1 + u2) - dynamics.step(model, x, u2)
    rhs = dynamics.step(model, x, u1) - dynamics.step(model, x, np.zeros(model.p))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + np.abs(x).max() + np.abs(u1).max() + np.abs(u2).max()))


@pytest.mark.parametrize("mid", MODELS)
@given(data=st.data())
@settings(max_examples=100)
def test_linearization_second_order_remainder(mid, data):
    model = dynamics.get_model(mid)
    x = _in_box(model, data.draw(st.lists(unit, min_size=model.n, max_size=model.n)))
    d = 1e-2 * np.array(data.draw(st.lists(unit, min_size=model.n, max_size=model.n)))
    lin = dynamics.linearize(model, x)
    u0 = np.zeros(model.p)
    rem = dynamics.step(model, x + d, u0) - dynamics.step(model, x, u0) - lin.A @ d
    L = CURVATURE.get(mid, 0.0)
    assert np.linalg.norm(rem) <= 0.5 * L * (d @ d) + 1e-12


@pytest.mark.parametrize("mid", MODELS)
@given(frac=st.floats(0.0, 1.0))
def test_steady_state_residual(mid, frac):
    model = dynamics.get_model(mid)
    r = model.ref_lower + frac * (model.ref_upper - model.ref_lower)
    ss = dynamics.steady_state(model, r)
    assert np.linalg.norm(dynamics.step(model, ss.x_bar, ss.u_bar) - ss.x_bar) <= 1e-9
    assert np.linalg.norm(model.h(ss.x_bar, ss.u_bar) - r) <= 1e-9


@given(
    lo=st.floats(-10, 10), span=st.floats(0.0, 20.0), step=st.floats(0.01, 5.0),
)
def test_inclusive_grid_count(lo, span, step):
    g = dataset.GridSpec((lo,), (lo + span,), step)
    k = g.counts()[0]
    assert k == math.floor(span / step + 1e-9) + 1
    pts = g.points()[:, 0]
    assert pts[0] == lo and pts[-1] <= lo + span + 1e-9 * step


@given(n=st.integers(1, 6), data=st.data())
def test_pack_unpack_round_trip(n, data):
    vals = data.draw(st.lists(st.floats(-1e6, 1e6), min_size=n * (n + 1) // 2, max_size=n * (n + 1) // 2))
    P = dataset.unpack_symmetric(np.array(vals), n)
    assert np.array_equal(P, P.T)
    assert np.array_equal(dataset.pack_symmetric(P), np.array(vals))


@given(seed=st.integers(0, 2**31 - 1), x=st.lists(st.floats(-5, 5), min_size=2, max_size=2), r=unit)
@settings(max_examples=30)
def test_network_matrix_output_is_exactly_symmetric(seed, x, r):
    params = mlp.init(mlp.MlpArchitecture(3, hidden=(8, 8)), seed=seed)
    rng = np.random.default_rng(seed)
    for b in params.biases:
        b[:] = rng.normal(size=b.shape)
    _, P = mlp.forward(params, x, [r])
    assert np.array_equal(P, P.T)
    _, P_train = mlp.forward(params, x, [r], mode="train", seed=seed)
    assert np.array_equal(P_train, P_train.T)


@given(
    x=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    r=st.floats(-1, 1),
)
@settings(max_examples=15)
def test_pendulum_solution_recheck(x, r):
    model = dynamics.pendulum()
    cfg = SolverConfig()
    sol = solve(model, x, [r], cfg)
    assert sol.cost >= 0
    assert sol.feasible
    # rebuild the prediction and the residual without the solver's bookkeeping
    ss = dynamics.steady_state(model, [r])
    lin = dynamics.linearize(model, x)
    x_plus = lin.A @ np.array(x) + lin.B @ sol.u_star
    P = sol.P_star.L @ sol.P_star.L.T + cfg.eps_P * np.eye(2)
    e, ep = np.array(x) - ss.x_bar, x_plus - ss.x_bar
    resid = math.sqrt(ep @ P @ ep) - math.sqrt(e @ P @ e) + cfg.theta * np.linalg.norm(e)
    assert resid <= cfg.tol_feasibility
    lam = np.linalg.eigvalsh(P)
    assert lam[0] >= cfg.eps_P - 1e-12
    assert lam[-1] <= cfg.cap_P * (1 + 1e-9)
    assert abs(decrease_residual(x, x_plus, ss.x_bar, P, cfg.theta) - resid) <= 1e-12


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20)
def test_fixed_P_minimizer_is_one_step_lqr(seed):
    model = dynamics.get_model("drone-y")
    lin = dynamics.linearize(model, [0.0, 0.0])
    rng = np.random.default_rng(seed)
    P0 = LyapunovMatrix(np.tril(rng.normal(size=(2, 2))), 1e-3)
    x = _in_box(model, rng.uniform(-1, 1, 2))
    cfg = SolverConfig(theta=1.0, Qx=20.0, Qu=0.1)
    u = solve_fixed_P(lin.A, lin.B, x, [0.0, 0.0], [0.0], P0, cfg)
    ref = lqr_one_step(lin.A, lin.B, x, [0.0, 0.0], [0.0], P0.P, 0.1, 20 * np.eye(2))
    assert abs(u[0] - ref[0]) <= 1e-6


@given(
    lam=st.floats(1e-3, 100), delta=st.floats(0, 10), theta=st.floats(1e-3, 10), k=st.floats(0.1, 10),
)
def test_sigma_homogeneity(lam, delta, theta, k):
    assert roa.sigma(lam, k * delta, theta) == pytest.approx(k * roa.sigma(lam, delta, theta), rel=1e-12, abs=1e-300)


@given(
    delta=st.floats(0, 5), lam_hi=st.floats(1e-3, 10), ratio=st.floats(1e-3, 1), mu_g=st.floats(0, 2),
    du=st.floats(0, 0.1), dP=st.floats(0, 1e-4), g=st.floats(0, 2), theta=st.floats(1e-2, 5),
)
def test_vartheta_dominates_sigma(delta, lam_hi, ratio, mu_g, du, dP, g, theta):
    lam_lo = lam_hi * ratio
    if theta <= roa.theta_min(dP, lam_hi, lam_lo, mu_g, du):
        return
    v = roa.vartheta(delta, lam_hi, lam_lo, mu_g, du, dP, theta, g)
    assert v >= roa.sigma(lam_hi, delta, theta) * (1 - 1e-12)


@given(states=st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
def test_performance_index_is_sum_of_norms(states):
    S = np.array(states)
    assert closed_loop.performance_index(S) == pytest.approx(sum(math.hypot(a, b) for a, b in states), rel=1e-12)


@given(a=st.lists(st.booleans(), min_size=1, max_size=30), data=st.data())
def test_jaccard_bounds(a, data):
    b = data.draw(st.lists(st.booleans(), min_size=len(a), max_size=len(a)))
    j = roa.jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert roa.jaccard(a, a) == 1.0


@given(seed=st.integers(0, 1000), count=st.integers(0, 12))
@settings(max_examples=20)
def test_dataset_binary_round_trip(seed, count, tmp_path_factory):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(count, 2, 2))
    P = L @ L.transpose(0, 2, 1) + 1e-3 * np.eye(2)
    d = dataset.TrainingDataset(
        rng.normal(size=(count, 2)), rng.normal(size=(count, 1)), rng.normal(size=(count, 1)),
        dataset.pack_symmetric(P), rng.integers(0, 2, count).astype(np.uint8), rng.random(count),
        {"eps_P": 1e-3, "seed": seed},
    )
    path = tmp_path_factory.mktemp("ds") / "d.bin"
    dataset.save(d, path)
    assert dataset.load(path).equals(d)
