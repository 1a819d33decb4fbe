import numpy as np
import pytest

from lyapctl import dataset as ds
from lyapctl import dynamics
from lyapctl.exceptions import DatasetDegenerateError, FormatError
from lyapctl.solver import SolverConfig

from oracles import scalar_grid_oracle


def test_pendulum_grid_count():
    xs = ds.GridSpec((-5, -5), (5, 5), 0.1)
    rs = ds.GridSpec((-1,), (1,), 0.1)
    assert xs.counts() == (101, 101)
    assert rs.counts() == (21,)
    assert xs.size() * rs.size() == 214_221


def test_drone_grid_count_both_conventions():
    rs = ds.GridSpec.singleton(0.0)
    inc = ds.GridSpec((-0.5, -1.0), (0.5, 1.0), 0.01)
    exc = ds.GridSpec((-0.5, -1.0), (0.5, 1.0), 0.01, "exclusive-upper")
    assert inc.size() * rs.size() == 20_301
    assert exc.size() * rs.size() == 20_000


def test_one_dimensional_grid():
    np.testing.assert_allclose(ds.GridSpec((0,), (1,), 0.5).points()[:, 0], [0.0, 0.5, 1.0])


def test_grid_row_major_order():
    pts = ds.generate_grid(ds.GridSpec((0, 0), (1, 1), 1.0), ds.GridSpec((0,), (1,), 1.0))
    expected = [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]]
    np.testing.assert_array_equal(pts, expected)


@pytest.mark.parametrize(
    "kwargs",
    [dict(lower=(0,), upper=(1,), step=0.0), dict(lower=(1,), upper=(0,), step=0.1),
     dict(lower=(0, 0), upper=(1,), step=0.1), dict(lower=(0,), upper=(1,), step=0.1, endpoint_mode="open")],
)
def test_grid_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ds.GridSpec(**kwargs)


def test_grid_spec_round_trip():
    g = ds.GridSpec((-1, 0), (1, 2), (0.5, 0.25), "exclusive-upper")
    assert ds.GridSpec.from_dict(g.to_dict()) == g


def test_pack_unpack():
    P = np.array([[1.0, 2.0], [2.0, 3.0]])
    np.testing.assert_array_equal(ds.pack_symmetric(P), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ds.unpack_symmetric([1.0, 2.0, 3.0], 2), P)


def test_equilibrium_label():
    d = ds.build_dataset(dynamics.pendulum(), [[0.0, 0.0, 0.0]], SolverConfig())
    assert len(d) == 1
    assert abs(d.u[0, 0]) <= 1e-9
    np.testing.assert_allclose(d.P_matrices[0], 1e-3 * np.eye(2), atol=1e-9)


@pytest.fixture(scope="module")
def scalar_toy():
    cfg = SolverConfig(theta=0.1, Qx=1.0, Qu=0.1)
    pts = ds.generate_grid(ds.GridSpec((-1,), (1,), 0.25), ds.GridSpec.singleton(0.0))
    return ds.build_dataset(dynamics.get_model("scalar"), pts, cfg), cfg


def test_scalar_toy_matches_grid_oracle(scalar_toy):
    d, _ = scalar_toy
    assert len(d) == 9
    for x, cost in zip(d.x[:, 0], d.cost):
        best, _, _ = scalar_grid_oracle(float(x), 0.1, du=1e-3 * max(abs(x), 0.1))
        assert cost <= 1.01 * best + 1e-12


def test_metadata_records_weights(scalar_toy):
    d, cfg = scalar_toy
    assert d.metadata["solver_config"]["Qx"] == 1.0
    assert d.metadata["solver_config"]["Qu"] == 0.1
    assert d.metadata["failure_count"] == 0
    assert d.metadata["solver_config_hash"] == cfg.config_hash()


def test_binary_round_trip(scalar_toy, tmp_path):
    d, _ = scalar_toy
    ds.save(d, tmp_path / "a.bin")
    back = ds.load(tmp_path / "a.bin")
    assert back.equals(d)
    ds.save(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_csv_round_trip(scalar_toy, tmp_path):
    d, _ = scalar_toy
    ds.save_csv(d, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "x1,r1,u1,P11,cost,status"
    assert len(lines) == 10
    back = ds.load_csv(tmp_path / "a.csv", d.metadata)
    assert back.equals(d)


def test_empty_dataset_round_trip(tmp_path):
    e = ds.TrainingDataset.empty(2, 1, 1, {"eps_P": 1e-3})
    ds.save(e, tmp_path / "e.bin")
    assert len(ds.load(tmp_path / "e.bin")) == 0
    ds.save_csv(e, tmp_path / "e.csv")
    assert len(ds.load_csv(tmp_path / "e.csv")) == 0


def test_version_mismatch_names_both_versions(scalar_toy, tmp_path):
    d, _ = scalar_toy
    path = tmp_path / "v.bin"
    ds.save(d, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="expected schema version 1, found 7"):
        ds.load(path)
    path.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        ds.load(path)


def test_floor_is_reverified_on_load(scalar_toy, tmp_path):
    d, _ = scalar_toy
    bad = d.subset(np.arange(len(d)))
    bad.P[0, 0] = 1e-6
    ds.save(bad, tmp_path / "bad.bin")
    with pytest.raises(FormatError, match="below eps_P"):
        ds.load(tmp_path / "bad.bin")


def test_split_sizes_and_determinism():
    n = 1000
    d = ds.TrainingDataset(
        np.arange(2 * n, dtype=float).reshape(n, 2), np.zeros((n, 1)), np.zeros((n, 1)),
        np.ones((n, 3)), np.zeros(n, dtype=np.uint8), np.zeros(n),
    )
    tr, va = ds.split(d, 0.1, seed=4)
    assert (len(tr), len(va)) == (900, 100)
    tr2, va2 = ds.split(d, 0.1, seed=4)
    assert tr.equals(tr2) and va.equals(va2)
    assert set(tr.x[:, 0]).isdisjoint(va.x[:, 0])
    with pytest.raises(ValueError):
        ds.split(d, 1.0)


def test_worker_count_does_not_change_dataset():
    pts = ds.generate_grid(ds.GridSpec((-1, -1), (1, 1), 1.0), ds.GridSpec((-0.5,), (0.5,), 0.5))
    one = ds.build_dataset(dynamics.pendulum(), pts, SolverConfig())
    three = ds.build_dataset(dynamics.pendulum(), pts, SolverConfig(), workers=3)
    assert one.equals(three)


def test_degenerate_dataset_raises():
    # a reference outside the steady-state set makes every point fail
    model = dynamics.pendulum()
    with pytest.raises(DatasetDegenerateError):
        ds.build_dataset(model, [[0.0, 0.0, 50.0], [0.1, 0.0, 50.0]], SolverConfig())


def test_build_dataset_rejects_bad_points():
    with pytest.raises(ValueError):
        ds.build_dataset(dynamics.pendulum(), np.zeros((0, 3)), SolverConfig())
    with pytest.raises(ValueError):
        ds.build_dataset(dynamics.pendulum(), np.zeros((2, 2)), SolverConfig())
