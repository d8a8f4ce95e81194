import numpy as np
import pytest
from numpy.polynomial import legendre

from pgdflow.mesh import (
    DIRICHLET,
    MeshError,
    NodalBasis,
    ParametricGrid,
    fekete_nodes_1d,
    gauss_quadrature_1d,
    jacobian_determinants,
    lattice_nodes,
    load_mesh,
    save_mesh,
    triangle_quadrature,
)
from pgdflow.meshgen import DESK, rectangle_mesh, swimmer_mesh


def write(tmp_path, text, name="m.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_fekete_low_degrees():
    assert np.allclose(fekete_nodes_1d(1), [-1, 1])
    assert np.allclose(fekete_nodes_1d(2), [-1, 0, 1])


def test_fekete_degree_four_matches_legendre_derivative_roots():
    r = max(legendre.Legendre.basis(4).deriv().roots().real)
    assert np.allclose(fekete_nodes_1d(4), [-1, -r, 0, r, 1], atol=1e-14)


def test_fekete_rejects_zero():
    with pytest.raises(ValueError):
        fekete_nodes_1d(0)


def test_gauss_rules():
    x, w = gauss_quadrature_1d(1)
    assert np.allclose(x, 0) and np.allclose(w, 2)
    x, w = gauss_quadrature_1d(2)
    assert np.allclose(np.sort(x), [-1 / np.sqrt(3), 1 / np.sqrt(3)]) and np.allclose(w, 1)
    x, w = gauss_quadrature_1d(5)
    assert abs(w @ x ** 4 - 0.4) < 1e-14
    assert abs(w.sum() - 2) < 1e-14


@pytest.mark.parametrize("deg", [0, 2, 5, 8, 11])
def test_triangle_rule_exactness(deg):
    q, w = triangle_quadrature(deg)
    assert np.all(w > 0) and abs(w.sum() - 0.5) < 1e-14
    # int x^a y^b over the unit triangle = a! b! / (a + b + 2)!
    from math import factorial
    for a in range(deg + 1):
        b = deg - a
        exact = factorial(a) * factorial(b) / factorial(a + b + 2)
        assert abs(w @ (q[:, 0] ** a * q[:, 1] ** b) - exact) < 1e-14


def test_triangle_rule_out_of_range():
    with pytest.raises(ValueError):
        triangle_quadrature(1000)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_nodal_basis_partition_of_unity_and_kronecker(k):
    b = NodalBasis(k)
    assert b.n == (k + 1) * (k + 2) // 2
    assert np.allclose(b.eval(lattice_nodes(k)), np.eye(b.n), atol=1e-12)
    pts = np.random.default_rng(0).dirichlet(np.ones(3), 20)[:, :2]
    assert np.allclose(b.eval(pts).sum(axis=1), 1, atol=1e-12)
    assert np.allclose(b.grad(pts).sum(axis=1), 0, atol=1e-11)


def test_nodal_basis_gradient_matches_finite_differences():
    b = NodalBasis(3)
    x = np.array([[0.2, 0.3]])
    h = 1e-6
    fd = np.stack([(b.eval(x + [h, 0]) - b.eval(x - [h, 0])) / (2 * h),
                   (b.eval(x + [0, h]) - b.eval(x - [0, h])) / (2 * h)], -1)
    assert np.allclose(b.grad(x), fd, atol=1e-7)


def test_single_triangle_file(tmp_path):
    p = write(tmp_path, "2 1 3 1 3\n0 0\n1 0\n0 1\n0 1 2\n0 0 1\n0 1 1\n0 2 2\n")
    m = load_mesh(p)
    assert m.n_elements == 1 and m.n_faces == 3
    assert np.all(m.face_elements[:, 1] == -1)


def test_two_triangles_share_a_face(tmp_path):
    p = write(tmp_path, "2 1 4 2 4\n0 0\n1 0\n1 1\n0 1\n0 1 2\n0 2 3\n0 0 1\n0 1 1\n1 1 1\n1 2 1\n")
    m = load_mesh(p)
    inner = np.flatnonzero(m.face_elements[:, 1] >= 0)
    assert len(inner) == 1 and m.n_faces - len(inner) == 4


def test_parse_errors_report_line_numbers(tmp_path):
    with pytest.raises(MeshError, match=":3:"):
        load_mesh(write(tmp_path, "2 1 3 1 0\n0 0\n1 x\n0 1\n0 1 2\n"))
    with pytest.raises(MeshError, match="unknown tag"):
        load_mesh(write(tmp_path, "2 1 3 1 1\n0 0\n1 0\n0 1\n0 1 2\n0 0 7\n"))
    with pytest.raises(MeshError):
        load_mesh(write(tmp_path, "2 1 3 1 0\n0 0\n1 0\n0 1\n0 2 1\n"))  # clockwise
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "missing.txt")


def test_boundary_must_match_connectivity(tmp_path):
    # an edge listed as boundary that is shared by two elements
    with pytest.raises(MeshError):
        load_mesh(write(tmp_path, "2 1 4 2 1\n0 0\n1 0\n1 1\n0 1\n0 1 2\n0 2 3\n0 2 1\n"))


@pytest.mark.parametrize("k", [1, 3])
def test_save_load_round_trip(tmp_path, k):
    m = rectangle_mesh(k, 2, 3)
    save_mesh(m, tmp_path / "r.txt")
    m2 = load_mesh(tmp_path / "r.txt")
    assert np.array_equal(m.elements, m2.elements) and np.allclose(m.nodes, m2.nodes)
    assert np.array_equal(m.faces, m2.faces)


def test_swimmer_mesh_invariants():
    m = swimmer_mesh(3, DESK)
    assert m.elements.shape[1] == 10
    assert m.n_elements >= 400
    counts = np.bincount(np.concatenate([m.face_elements[:, 0], m.face_elements[m.face_elements[:, 1] >= 0, 1]]),
                         minlength=m.n_elements)
    assert np.all(counts == 3)
    assert np.all(jacobian_determinants(m) > 0)
    boundary = m.face_elements[:, 1] < 0
    assert np.all(m.boundary_tags[boundary] > 0)


class TestParametricGrid:
    def test_node_count_and_endpoints(self):
        g = ParametricGrid((-1.0, 1.0), 10, 4)
        assert g.n_nodes == 41 == len(g.nodes)
        assert np.all(np.isin(np.linspace(-1, 1, 11), g.nodes))
        assert np.all(np.diff(g.nodes) > 0)

    def test_default_quadrature_exact_for_degree_2k(self):
        g = ParametricGrid((0.0, 2.0), 3, 4)
        for p in range(9):
            assert abs(g.quad_weights @ g.quad_points ** p - 2 ** (p + 1) / (p + 1)) < 1e-12

    def test_interpolation_reproduces_polynomials(self):
        g = ParametricGrid((-3.0, 2.0), 4, 3)
        mu = np.linspace(-3, 2, 17)
        assert np.allclose(g.interpolate(g.nodes ** 3 - g.nodes, mu), mu ** 3 - mu, atol=1e-12)

    def test_mass_and_load(self):
        g = ParametricGrid((0.0, 1.0), 2, 2)
        one = np.ones(g.n_nodes)
        assert abs(one @ g.mass() @ one - 1) < 1e-14
        assert abs(g.load() @ g.nodes - 0.5) < 1e-14

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ParametricGrid((-1.0, 1.0), 2, 2).basis_at(1.5)

    def test_coarse_indices(self):
        g = ParametricGrid((-1.0, 1.0), 5, 4)
        assert len(g.coarse_indices(1)) == 6 and len(g.coarse_indices(2)) == 11
        with pytest.raises(ValueError):
            g.coarse_indices(3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ParametricGrid((1.0, 1.0), 2, 2)
        with pytest.raises(ValueError):
            ParametricGrid((0.0, 1.0), 0, 2)


def test_rectangle_boundary_tags():
    m = rectangle_mesh(2, 2, 2)
    assert np.all(m.boundary_tags[m.face_elements[:, 1] < 0] == DIRICHLET)
