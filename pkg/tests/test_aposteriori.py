import numpy as np
import pytest

from pgdflow.aposteriori import (
    AposterioriConfig,
    SnapshotPlan,
    SnapshotTensor,
    als_rank_one,
    compute_snapshots,
    greedy_rank_one,
    run_aposteriori,
)
from pgdflow.mesh import ParametricGrid
from pgdflow.separated import FlatLayout, ZeroModeError

from helpers import channel_system
from oracles import gapped_matrix


@pytest.mark.parametrize("seed", range(5))
def test_greedy_amplitudes_are_singular_values(seed):
    sv = np.array([10.0, 4.0, 1.5, 0.5, 0.1])
    A = gapped_matrix(40, 25, sv, seed)
    res = greedy_rank_one(A, max_modes=5, als_tol=1e-14, als_max_iter=5000)
    assert np.allclose(res.sigmas, sv, rtol=1e-6)
    assert np.all(np.diff(res.residual_norms) <= 1e-12)


def test_rank_one_recovers_singular_vectors():
    A = gapped_matrix(20, 10, np.array([3.0, 1.0]), 3)
    U, s, Vt = np.linalg.svd(A)
    f, (psi,), sigma, _ = als_rank_one(A, 1e-14, 5000)
    assert sigma == pytest.approx(s[0], rel=1e-10)
    assert abs(abs(f @ U[:, 0]) - 1) < 1e-8 and abs(abs(psi @ Vt[0]) - 1) < 1e-8


@pytest.mark.parametrize("shape", [(12, 7, 5), (6, 4, 3, 5)])
def test_greedy_residual_monotone_on_tensors(shape):
    T = np.random.default_rng(len(shape)).standard_normal(shape)
    res = greedy_rank_one(T, max_modes=15)
    norms = [res.initial_norm] + res.residual_norms
    assert np.all(np.diff(norms) <= 1e-12 * res.initial_norm)


def test_rank_one_tensor_in_one_step():
    rng = np.random.default_rng(0)
    a, b, c = rng.standard_normal(6), rng.standard_normal(4), rng.standard_normal(5)
    T = np.einsum("i,j,k->ijk", a, b, c)
    res = greedy_rank_one(T, max_modes=3, residual_tol=1e-12 * np.linalg.norm(T))
    assert len(res.sigmas) == 1 and res.residual_norms[-1] < 1e-10


def test_zero_tensor():
    with pytest.raises(ZeroModeError):
        als_rank_one(np.zeros((3, 3)))
    assert greedy_rank_one(np.zeros((3, 3)), max_modes=2).sigmas == []


def test_orthogonal_start_falls_back():
    # the constant initial factor is orthogonal to every column sum
    A = np.array([[1.0, -1.0], [2.0, -2.0]])
    f, (psi,), sigma, _ = als_rank_one(A)
    assert sigma == pytest.approx(np.linalg.norm(A))


class TestPlan:
    grid = ParametricGrid((-1.0, 1.0), 10, 4)

    @pytest.mark.parametrize("level,n", [("vertices", 11), ("half", 21), ("all", 41)])
    def test_counts(self, level, n):
        plan = SnapshotPlan.uniform((self.grid,), level)
        assert plan.n_s == n and plan.sub_grids[0].n_nodes == n
        assert np.allclose(plan.coords()[0], plan.sub_grids[0].nodes)

    def test_two_parameters_row_major(self):
        g2 = ParametricGrid((0.0, 1.0), 2, 2)
        plan = SnapshotPlan((self.grid, g2), ("vertices", "all"))
        pts = list(plan.points())
        assert plan.shape == (11, 5) and len(pts) == 55
        assert pts[1] == ((0, 1), (-1.0, 0.25))

    def test_invalid_levels(self):
        with pytest.raises(ValueError):
            SnapshotPlan.uniform((self.grid,), "most")
        with pytest.raises(ValueError):
            SnapshotPlan.uniform((ParametricGrid((0.0, 1.0), 2, 1),), "half")


def test_tensor_file_round_trip(tmp_path):
    T = SnapshotTensor(np.random.default_rng(0).standard_normal((5, 3, 4)), [np.arange(3.0), np.linspace(0, 1, 4)])
    T.save(tmp_path / "t.bin")
    back = SnapshotTensor.load(tmp_path / "t.bin")
    assert np.array_equal(back.data, T.data) and all(np.array_equal(a, b) for a, b in zip(back.coords, T.coords))
    (tmp_path / "bad").write_bytes(b"nope\n---\n")
    with pytest.raises(ValueError):
        SnapshotTensor.load(tmp_path / "bad")


def test_snapshots_and_separation_solve_counts():
    s = channel_system(2)
    grids = (ParametricGrid((-1.0, 1.0), 2, 2), ParametricGrid((-1.0, 1.0), 2, 2))
    plan = SnapshotPlan.uniform(grids, "vertices")
    T = compute_snapshots(plan, s, threads=2)
    assert s.n_solves == plan.n_s == 9
    for mi, mu in plan.points():
        assert np.allclose(T.data[(slice(None),) + mi], s.solve_at(mu).vector())
    before = s.n_solves
    sol = run_aposteriori(T, AposterioriConfig(eta_star=1e-12), plan.sub_grids, s.layout, plan.n_s)
    assert s.n_solves == before
    assert sol.n_solves == 9 and sol.provenance == "aposteriori"
    # interpolation at the snapshot points reproduces the snapshots
    for mi, mu in plan.points():
        ref = T.data[(slice(None),) + mi]
        assert np.linalg.norm(sol.evaluate_vector(mu) - ref) <= 1e-8 * np.linalg.norm(ref)


def test_failed_snapshot_is_reported():
    s = channel_system(1)
    plan = SnapshotPlan.uniform((ParametricGrid((-2.0, 1.0), 1, 1),), "all")  # -2 lies outside the mapping range
    with pytest.raises(RuntimeError, match="snapshot at mu"):
        compute_snapshots(plan, s)


def test_run_checks_tensor_shape():
    with pytest.raises(ValueError):
        run_aposteriori(np.zeros((3, 4)), AposterioriConfig(), (ParametricGrid((0.0, 1.0), 1, 2),), FlatLayout(3))


def test_config_validation():
    with pytest.raises(ValueError):
        AposterioriConfig(eta_star=0)
    with pytest.raises(ValueError):
        AposterioriConfig(n_iter=0)
