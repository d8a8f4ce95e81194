import numpy as np
import pytest

from pgdflow.hdg import Layout
from pgdflow.mesh import ParametricGrid
from pgdflow.separated import (
    FlatLayout,
    SeparatedSolution,
    ZeroModeError,
    compress,
    normalize_mode,
    stopping_block,
)

from oracles import nodal_tensor, random_solution

GRIDS = (ParametricGrid((-1.0, 1.0), 3, 2), ParametricGrid((0.0, 2.0), 2, 3))


def test_normalize_mode_blocks_and_amplitudes():
    lay = Layout(4, 2, 3)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(lay.size)
    x[lay.slices()["rho"]] = 0.0
    psi = [2 * np.ones(3), 3 * np.ones(2)]
    md = normalize_mode(lay, x, psi)
    assert md.sigma["rho"] == 0.0 and not md.blocks["rho"].any()
    for p in md.psi:
        assert np.linalg.norm(p) == pytest.approx(1.0)
    scale = np.linalg.norm(psi[0]) * np.linalg.norm(psi[1])
    assert np.allclose(md.vector(lay), x * scale)
    assert md.sigma["uhat"] == pytest.approx(np.linalg.norm(x[:4]) * scale)


def test_zero_mode_rejected():
    with pytest.raises(ZeroModeError):
        normalize_mode(FlatLayout(3), np.zeros(3), [np.ones(2)])
    with pytest.raises(ZeroModeError):
        normalize_mode(FlatLayout(3), np.ones(3), [np.zeros(2)])


def test_stopping_block():
    assert stopping_block(Layout(1, 1, 1)) == "uhat"
    assert stopping_block(FlatLayout(2)) == "x"


def test_evaluation_is_sum_of_products():
    lay = FlatLayout(5)
    sol = random_solution(lay, GRIDS, 3)
    mu = (0.3, 1.7)
    expected = sum(md.vector(lay) * np.prod([g.interpolate(p, v)[0] for g, p, v in zip(GRIDS, md.psi, mu)])
                   for md in sol.modes)
    assert np.allclose(sol.evaluate_vector(mu), expected)
    assert np.allclose(sol.evaluate_vector(mu, 1), sol.truncated(1).evaluate_vector(mu))


def test_evaluation_at_nodes_matches_nodal_tensor():
    sol = random_solution(FlatLayout(4), GRIDS, 2)
    T = nodal_tensor(sol)
    assert np.allclose(sol.evaluate_vector((GRIDS[0].nodes[2], GRIDS[1].nodes[4])), T[:, 2, 4])


def test_out_of_range_and_wrong_arity():
    sol = random_solution(FlatLayout(4), GRIDS, 1)
    with pytest.raises(ValueError):
        sol.evaluate_vector((2.0, 1.0))
    with pytest.raises(ValueError):
        sol.evaluate_vector((0.0,))


def test_field_evaluation_needs_hdg_layout():
    sol = random_solution(FlatLayout(4), GRIDS, 1)
    with pytest.raises(TypeError):
        sol.evaluate_at((0.0, 1.0))
    hdg = random_solution(Layout(6, 2, 3), GRIDS, 2)
    fs = hdg.evaluate_at((0.0, 1.0))
    assert fs.u.shape == (2, 2, 3) and fs.L.shape == (2, 2, 2, 3)


@pytest.mark.parametrize("layout", [FlatLayout(7), Layout(6, 2, 3)])
def test_save_load_round_trip(tmp_path, layout):
    sol = random_solution(layout, GRIDS, 3, provenance="aposteriori")
    sol.n_solves = 42
    sol.save(tmp_path / "s.pgd")
    back = SeparatedSolution.load(tmp_path / "s.pgd")
    assert back.provenance == "aposteriori" and back.n_solves == 42 and back.n_modes == 3
    assert back.grids == sol.grids
    mu = (-0.4, 0.9)
    assert np.array_equal(back.evaluate_vector(mu), sol.evaluate_vector(mu))


def test_load_rejects_other_files(tmp_path):
    (tmp_path / "x").write_text("hello\n")
    with pytest.raises(ValueError):
        SeparatedSolution.load(tmp_path / "x")


def test_union_concatenates_modes():
    a = random_solution(FlatLayout(4), GRIDS, 2, seed=1)
    b = random_solution(FlatLayout(4), GRIDS, 1, seed=2)
    u = a.union(b)
    mu = (0.1, 0.2)
    assert u.n_modes == 3
    assert np.allclose(u.evaluate_vector(mu), a.evaluate_vector(mu) + b.evaluate_vector(mu))


class TestCompress:
    @pytest.mark.parametrize("rank", [1, 2, 4])
    def test_redundant_input_compresses_to_its_rank(self, rank):
        base = random_solution(FlatLayout(30), GRIDS, rank, seed=rank)
        # split every mode into three scaled copies: 3 * rank terms of tensor rank `rank`
        padded = SeparatedSolution(base.layout, base.grids)
        for md in base.modes:
            for c in (0.2, 0.5, 0.3):
                padded.append(normalize_mode(base.layout, c * md.vector(base.layout), md.psi))
        out = compress(padded, tol=1e-10)
        assert out.n_modes == rank
        assert np.allclose(nodal_tensor(out), nodal_tensor(base), atol=1e-8 * np.abs(nodal_tensor(base)).max())

    def test_never_more_modes(self):
        sol = random_solution(FlatLayout(30), GRIDS, 5, seed=7)
        out = compress(sol, tol=1e-10)
        assert out.n_modes <= sol.n_modes
        assert np.abs(nodal_tensor(out) - nodal_tensor(sol)).max() <= 1e-8 * np.abs(nodal_tensor(sol)).max()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compress(SeparatedSolution(FlatLayout(3), GRIDS))
