import json
import math

import numpy as np
import pytest

from lyapctl import dynamics, roa
from lyapctl.exceptions import BoundUndefinedError, FormatError
from lyapctl.solver import dare


class BatchGain:
    """Constant-gain state feedback with a batched entry point."""

    def __init__(self, K):
        self.K = np.atleast_2d(K)

    def control(self, x, r):
        return -self.K @ np.asarray(x), None

    def control_batch(self, X, r):
        return -np.asarray(X) @ self.K.T


@pytest.fixture(scope="module")
def pendulum_gain():
    model = dynamics.pendulum()
    lin = dynamics.linearize(model, [0.0, 0.0])
    _, K = dare(lin.A, lin.B, 2 * np.eye(2), 0.1 * np.eye(1))
    return model, BatchGain(K)


def test_sigma_examples():
    assert roa.sigma(1.0, 0.1, 0.01) == pytest.approx(30.0, rel=1e-14)
    assert roa.sigma(4.0, 0.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        roa.sigma(1.0, 0.1, 0.0)


def test_sigma_is_linear_in_delta_and_inverse_in_theta():
    base = roa.sigma(2.0, 0.3, 0.05)
    assert roa.sigma(2.0, 0.6, 0.05) == pytest.approx(2 * base, rel=1e-14)
    assert roa.sigma(2.0, 0.3, 0.1) == pytest.approx(base / 2, rel=1e-14)


def test_theta_min_examples():
    assert roa.theta_min(0.0, 3.0, 1.0, 0.5, 0.0) == 0.0
    assert roa.theta_min(0.0, 3.0, 1.0, 0.0, 0.7) == 0.0
    assert roa.theta_min(0.01, 1.0, 1.0, 1.0, 0.1) == pytest.approx(0.31, abs=1e-15)


def test_vartheta_examples():
    s = roa.sigma(2.0, 0.4, 0.1)
    assert roa.vartheta(0.4, 2.0, 0.5, 0.0, 0.0, 0.0, 0.1, 1.0) == pytest.approx(s, rel=1e-14)
    assert roa.vartheta(0.0, 2.0, 0.5, 0.0, 0.0, 0.0, 0.1, 1.0) == 0.0
    with pytest.raises(BoundUndefinedError):
        roa.vartheta(0.4, 1.0, 1.0, 1.0, 0.1, 0.01, 0.31, 1.0)


def test_vartheta_tends_to_sigma_as_gap_vanishes():
    s = roa.sigma(2.0, 0.4, 0.1)
    values = [roa.vartheta(0.4, 2.0, 0.5, 0.2, g, g * g, 0.1, 1.0) for g in (1e-2, 1e-4, 1e-6, 1e-8)]
    assert all(v >= s for v in values)
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(s, rel=1e-6)


def test_bound_report_brackets_every_eigenvalue():
    rng = np.random.default_rng(0)
    Ls = rng.normal(size=(50, 2, 2))
    Ps = Ls @ Ls.transpose(0, 2, 1) + 1e-3 * np.eye(2)
    extra = np.array([np.diag([0.5, 7.0])])
    consts = dynamics.ModelConstants(delta=0.2, mu_f=1.0, mu_g=0.0, sample_count=0, grid_density=3)
    rep = roa.bound_report(consts, [Ps, extra], theta=0.1, g_at_xbar_norm=0.1)
    lam = np.linalg.eigvalsh(np.concatenate([Ps, extra]))
    assert np.all(lam <= rep.lambda_bar_P) and np.all(lam >= rep.lambda_underbar_P)
    assert rep.lambda_bar_P >= rep.lambda_underbar_P >= 1e-3 - 1e-12
    assert rep.vartheta == pytest.approx(rep.sigma, rel=1e-14)
    assert json.loads(rep.to_json())["sigma"] == rep.sigma


def test_bound_report_marks_undefined_bound():
    consts = dynamics.ModelConstants(delta=0.2, mu_f=1.0, mu_g=0.0, sample_count=0, grid_density=3)
    rep = roa.bound_report(consts, [np.eye(2)[None]], theta=0.01, g_at_xbar_norm=0.1, du_bar=1.0, dP_bar=1.0)
    assert rep.vartheta is None and not rep.vartheta_defined
    assert rep.theta_min == pytest.approx(2.0)


def test_reference_partition():
    assert roa.roa_reference_partition(-1.0, 1.0, 2) == [(-1.0, 0.0), (0.0, 1.0)]
    assert roa.roa_reference_partition(-1.0, 1.0, 1) == [(-1.0, 1.0)]
    parts = roa.partition_steady_states(dynamics.pendulum(), roa.roa_reference_partition(-1, 1, 2), samples=3)
    np.testing.assert_allclose(parts[1]["steady_states"][:, 0], [0.0, 0.5, 1.0])


def test_cell_grid_centers():
    g = roa.cell_grid([-5, -5], [5, 5], 100)
    assert g.counts() == (100, 100)
    assert g.axes()[0][0] == pytest.approx(-4.95)
    assert g.axes()[0][-1] == pytest.approx(4.95)


def test_estimate_roa_on_pendulum(pendulum_gain):
    model, ctrl = pendulum_gain
    grid = roa.cell_grid(model.lower, model.upper, 20)
    res = roa.estimate_roa(model, ctrl, [0.0], grid, horizon=200)
    assert res.membership.size == 400
    assert res.contains([0.0, 0.0])
    assert not res.contains([4.75, 4.75])
    assert 0 < res.fraction_inside < 1
    # membership agrees with the single-state rule
    for x in grid.points()[::37]:
        assert roa.is_member(model, ctrl, x, [0.0], horizon=200) == res.contains(x)


def test_left_box_is_permanent_in_longer_horizons(pendulum_gain):
    model, ctrl = pendulum_gain
    grid = roa.cell_grid(model.lower, model.upper, 16)
    short = roa.estimate_roa(model, ctrl, [0.0], grid, horizon=30)
    long = roa.estimate_roa(model, ctrl, [0.0], grid, horizon=120)
    left = short.exit_step > 0
    assert left.any()
    assert not long.membership[left].any()
    np.testing.assert_array_equal(long.exit_step[left], short.exit_step[left])


def test_worker_count_independence(pendulum_gain, monkeypatch):
    model, ctrl = pendulum_gain
    monkeypatch.setattr(roa, "CHUNK", 50)
    grid = roa.cell_grid(model.lower, model.upper, 15)
    a = roa.estimate_roa(model, ctrl, [0.0], grid, horizon=60)
    b = roa.estimate_roa(model, ctrl, [0.0], grid, horizon=60, workers=3)
    assert a.membership.tobytes() == b.membership.tobytes()
    assert a.exit_step.tobytes() == b.exit_step.tobytes()


def test_controller_without_batch_entry(pendulum_gain):
    model, ctrl = pendulum_gain

    class Single:
        def control(self, x, r):
            return ctrl.control(x, r)

    grid = roa.cell_grid(model.lower, model.upper, 6)
    a = roa.estimate_roa(model, ctrl, [0.0], grid, horizon=40)
    b = roa.estimate_roa(model, Single(), [0.0], grid, horizon=40)
    np.testing.assert_array_equal(a.membership, b.membership)


def test_bitmap_round_trip(pendulum_gain, tmp_path):
    model, ctrl = pendulum_gain
    res = roa.estimate_roa(model, ctrl, [0.0], roa.cell_grid(model.lower, model.upper, 9), horizon=50)
    roa.save_bitmap(res, tmp_path / "r.bin")
    back = roa.load_bitmap(tmp_path / "r.bin")
    np.testing.assert_array_equal(back.membership, res.membership)
    np.testing.assert_array_equal(back.exit_step, res.exit_step)
    assert back.region == res.region and back.horizon == 50
    roa.write_bitmap_csv(res, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,inside" and len(lines) == 82
    raw = bytearray((tmp_path / "r.bin").read_bytes())
    raw[4] = 3
    (tmp_path / "r.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        roa.load_bitmap(tmp_path / "r.bin")


def test_jaccard():
    assert roa.jaccard([1, 1, 0], [1, 0, 0]) == 0.5
    assert roa.jaccard([0, 0], [0, 0]) == 1.0


def test_outside_start_is_not_member(pendulum_gain):
    model, ctrl = pendulum_gain
    assert not roa.is_member(model, ctrl, [6.0, 0.0], [0.0])
    assert math.isfinite(roa.sigma(10.0, 3.08, 0.01))
