import csv

import numpy as np
import pytest

from pgdflow import analysis as an
from pgdflow.apriori import AprioriConfig, run_apriori
from pgdflow.hdg import HDGSystem, StokesProblem
from pgdflow.mesh import ParametricGrid
from pgdflow.meshgen import rectangle_mesh
from pgdflow.separated import SeparatedSolution, normalize_mode

from helpers import channel_system, exact_velocity


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_parametric_quadrature_integrates_polynomials():
    grids = (ParametricGrid((-1.0, 1.0), 3, 4), ParametricGrid((0.0, 2.0), 2, 2))
    q = an.parametric_quadrature(grids)
    assert q.n_points == 15 * 6 and q.shape == (3, 2)
    assert q.weights.sum() == pytest.approx(4.0)
    f = q.points[:, 0] ** 8 * q.points[:, 1] ** 5
    assert q.weights @ f == pytest.approx((2 / 9) * (2 ** 6 / 6), rel=1e-12)
    assert np.bincount(q.cell_index()).tolist() == [15] * 6


def test_reference_cache_counts_unique_solves():
    calls = []
    cache = an.ReferenceCache(lambda mu: calls.append(mu) or np.array([mu[0], 1.0]))
    out = cache.get_many([(0.1,), (0.2,), (0.1,)])
    assert len(calls) == 2 == cache.n_solves
    assert np.array_equal(out[2], [0.1, 1.0])
    cache.get((0.1 + 1e-15,))
    assert cache.n_solves == 2


def test_reference_cache_wraps_failures():
    def bad(mu):
        raise ValueError("boom")
    with pytest.raises(RuntimeError, match="reference solve"):
        an.ReferenceCache(bad).get((0.0,))


def test_field_norm_is_l2_norm():
    mesh = rectangle_mesh(3, 3, 3)
    s = HDGSystem(mesh, StokesProblem(1.0))
    g = s.geo
    # interpolate smooth fields at the element nodes
    X = mesh.element_coords()
    sol = np.zeros(s.layout.size)
    sl = s.layout.slices()
    sol[sl["u"]] = np.moveaxis(exact_velocity(X), 2, 1).ravel()
    sol[sl["p"]] = (X[..., 0] ** 2 * X[..., 1]).ravel()
    nf = an.FieldNorm(g)
    uq = np.einsum("qa,eja->eqj", g.N, sol[sl["u"]].reshape(-1, 2, g.n))
    assert np.linalg.norm(nf.values(sol, "u")) == pytest.approx(np.sqrt((g.wq[..., None] * uq ** 2).sum()), rel=1e-12)
    # p = x^2 y is interpolated exactly: int p^2 = 1/15
    assert np.linalg.norm(nf.values(sol, "p")) ** 2 == pytest.approx(1 / 15, rel=1e-12)
    both = nf.values(np.column_stack([sol, 2 * sol]), "p")
    assert both.shape[1] == 2 and np.allclose(both[:, 1], 2 * both[:, 0])


@pytest.fixture(scope="module")
def small_run():
    s = channel_system(1)
    grids = (ParametricGrid((-1.0, 1.0), 2, 2),)
    sol = run_apriori(s, grids, AprioriConfig(eta_star=1e-12, n_i=2, max_modes=6))
    quad = an.parametric_quadrature(grids)
    cache = an.ReferenceCache(s.solve_at)
    from pgdflow.hdg import drag_functional, surface_faces
    drag = drag_functional(s, surface_faces(s.mesh, [3]))
    rep = an.error_report(sol, cache, quad, an.FieldNorm(s.geo), drag, setting="n_i=2")
    return s, grids, sol, quad, cache, drag, rep


def test_error_report_shapes_and_solves(small_run):
    s, grids, sol, quad, cache, drag, rep = small_run
    assert rep.method == "apriori" and len(rep.E_D) == sol.n_modes
    assert rep.solves.tolist() == [3 * m for m in range(1, sol.n_modes + 1)]
    assert cache.n_solves == quad.n_points
    assert rep.E["u"][-1] < rep.E["u"][0]


def test_l2_error_matches_direct_computation(small_run):
    s, grids, sol, quad, cache, drag, rep = small_run
    nf = an.FieldNorm(s.geo)
    num = den = 0.0
    for mu, w in zip(quad.points, quad.weights):
        r = nf.values(cache.get(mu), "p")
        d = nf.values(sol.evaluate_vector(mu, 3), "p") - r
        num += w * d @ d
        den += w * r @ r
    assert rep.E["p"][2] == pytest.approx(np.sqrt(num / den), rel=1e-10)


def test_drag_surface_matches_field_evaluation(small_run):
    s, grids, sol, quad, cache, drag, rep = small_run
    surf = an.drag_response_surface(sol, drag, 0)
    for mu in (-0.3, 0.8):
        assert surf((mu,)) == pytest.approx(drag[0] @ sol.evaluate_vector((mu,)), rel=1e-12)
        assert surf.history((mu,))[-1] == pytest.approx(surf((mu,)))


def test_drag_errors_exclude_zero_reference():
    q = an.ParametricQuadrature(np.array([[0.0], [1.0], [2.0]]), np.ones(3), np.array([[0], [0], [1]]), (2,))
    d = an.drag_errors(np.array([1.0, 2.2, 0.1]), np.array([1.0, 2.0, 0.0]), q)
    assert d.excluded.tolist() == [2]
    assert np.isnan(d.eps[2]) and d.eps[1] == pytest.approx(0.1)
    assert d.smoothed[0] == pytest.approx(0.05) and np.isnan(d.smoothed[1])
    assert d.E_D == pytest.approx(np.sqrt(0.05 / 5))


def test_comparison_counts_solves():
    rep = an.ErrorReport("apriori", "n_i=2", np.arange(1, 16), {v: np.full(15, 0.1) for v in "upL"},
                         np.geomspace(1e-1, 1e-4, 15), 3 * np.arange(1, 16))
    rows, matched = an.comparison_report([rep])
    assert rows[0][:4] == ("apriori", "n_i=2", 15, 45)
    assert [m[3] for m in matched] == [rep.solves_to_reach(1e-2), rep.solves_to_reach(1e-3), None]


def test_writers(tmp_path, small_run):
    s, grids, sol, quad, cache, drag, rep = small_run
    an.write_errors_vs_modes(tmp_path / "e.csv", [rep])
    rows = read_csv(tmp_path / "e.csv")
    assert rows[0] == ["method", "setting", "m", "solves", "E_u", "E_p", "E_L", "E_D"] and len(rows) == 7
    an.write_error_map(tmp_path / "m.csv", rep, quad, grids)
    assert len(read_csv(tmp_path / "m.csv")) == 1 + grids[0].n_elements
    an.write_drag_surface(tmp_path / "d.csv", {"drag": an.drag_response_surface(sol, drag)}, grids, 3)
    rows = read_csv(tmp_path / "d.csv")
    assert rows[0] == ["mu1", "drag"] and len(rows) == 1 + 7
    an.write_summary(tmp_path / "s.txt", {"a": 1, "b": "x"})
    assert (tmp_path / "s.txt").read_text() == "a: 1\nb: x\n"


def test_empty_solution_error_is_one(small_run):
    s, grids, sol, quad, cache, drag, rep = small_run
    empty = SeparatedSolution(s.layout, grids)
    E = an.multidim_l2_error(empty, cache, quad, an.FieldNorm(s.geo), modes=[0])
    assert E["u"][0] == pytest.approx(1.0)


def test_exact_separated_solution_has_zero_error(small_run):
    s, grids, sol, quad, cache, drag, rep = small_run
    # the nodal interpolant of the reference data at grid nodes is not exact, but a constant one is
    x0 = cache.get((0.0,))
    const = SeparatedSolution(s.layout, grids)
    const.append(normalize_mode(s.layout, x0, [np.ones(grids[0].n_nodes)]))
    ref = an.ReferenceCache(lambda mu: x0)
    E = an.multidim_l2_error(const, ref, quad, an.FieldNorm(s.geo))
    assert max(E["u"][0], E["p"][0], E["L"][0]) < 1e-14
