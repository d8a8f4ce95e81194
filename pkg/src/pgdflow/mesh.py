"""High-order triangular meshes, nodal bases, quadrature rules and 1D parametric grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi

DIRICHLET, NEUMANN, SLIP, INTERIOR = 1, 2, 3, 0
TAG_NAMES = {DIRICHLET: "Dirichlet", NEUMANN: "Neumann", SLIP: "Slip", INTERIOR: "Interior"}

MAX_TRIANGLE_DEGREE = 40

# reference triangle (0,0), (1,0), (0,1); local edge f runs from vertex f to vertex (f+1) % 3
REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class MeshError(ValueError):
    pass


# ---------------------------------------------------------------------------
# 1D rules


def fekete_nodes_1d(k: int) -> np.ndarray:
    """Gauss-Lobatto nodes of degree k on [-1, 1] (the 1D Fekete points)."""
    if k < 1:
        raise ValueError("degree must be >= 1")
    if k == 1:
        return np.array([-1.0, 1.0])
    inner = legendre.Legendre.basis(k).deriv().roots().real
    x = np.concatenate(([-1.0], np.sort(inner), [1.0]))
    x = 0.5 * (x - x[::-1])
    if k % 2 == 0:
        x[k // 2] = 0.0
    return x


def gauss_quadrature_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ValueError("number of points must be >= 1")
    x, w = legendre.leggauss(n)
    return x, w


def lagrange_1d(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Values of the Lagrange polynomials on `nodes` at points x, shape (len(x), len(nodes))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(nodes)
    out = np.ones((len(x), n))
    for a in range(n):
        for b in range(n):
            if b != a:
                out[:, a] *= (x - nodes[b]) / (nodes[a] - nodes[b])
    return out


def triangle_quadrature(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss rule on the reference triangle, exact for total degree <= `degree`."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if degree > MAX_TRIANGLE_DEGREE:
        raise ValueError(f"requested degree {degree} above supported range {MAX_TRIANGLE_DEGREE}")
    n = degree // 2 + 1
    gu, wu = legendre.leggauss(n)
    gv, wv = roots_jacobi(n, 1.0, 0.0)
    U, V = np.meshgrid(gu, gv, indexing="ij")
    W = np.outer(wu, wv) / 8.0
    x = (1.0 + U) * (1.0 - V) / 4.0
    y = (1.0 + V) / 2.0
    return np.column_stack([x.ravel(), y.ravel()]), W.ravel()


# ---------------------------------------------------------------------------
# nodal basis on the reference triangle


def lattice_nodes(k: int) -> np.ndarray:
    """Equispaced degree-k nodes: vertices, edge nodes (from each edge's start vertex), interior."""
    if k < 1:
        raise ValueError("degree must be >= 1")
    pts = [REF_VERTICES[0], REF_VERTICES[1], REF_VERTICES[2]]
    for f in range(3):
        a, b = REF_VERTICES[f], REF_VERTICES[(f + 1) % 3]
        for i in range(1, k):
            pts.append(a + (b - a) * i / k)
    for j in range(1, k):
        for i in range(1, k - j):
            pts.append(np.array([i / k, j / k]))
    return np.array(pts)


def edge_local_nodes(k: int, f: int) -> np.ndarray:
    """Local node ids lying on edge f, ordered from its start vertex to its end vertex."""
    start = 3 + f * (k - 1)
    return np.array([f, *range(start, start + k - 1), (f + 1) % 3])


def edge_point(f: int, s: np.ndarray) -> np.ndarray:
    """Reference coordinates on edge f at local edge parameter s in [-1, 1]."""
    s = np.asarray(s, dtype=float)
    a, b = REF_VERTICES[f], REF_VERTICES[(f + 1) % 3]
    t = 0.5 * (1.0 + s)
    return a[None, :] + t[:, None] * (b - a)[None, :]


def edge_tangent(f: int) -> np.ndarray:
    """d(reference point)/ds along edge f."""
    return 0.5 * (REF_VERTICES[(f + 1) % 3] - REF_VERTICES[f])


@dataclass(frozen=True)
class NodalBasis:
    k: int
    nodes: np.ndarray = field(init=False)
    _exps: np.ndarray = field(init=False, repr=False)
    _coef: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = lattice_nodes(self.k)
        exps = np.array([(a, d - a) for d in range(self.k + 1) for a in range(d, -1, -1)])
        V = self._monomials(nodes, exps)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "_exps", exps)
        object.__setattr__(self, "_coef", np.linalg.inv(V))

    @property
    def n(self) -> int:
        return (self.k + 1) * (self.k + 2) // 2

    @staticmethod
    def _monomials(x, exps):
        x = np.atleast_2d(x)
        return x[:, 0:1] ** exps[None, :, 0] * x[:, 1:2] ** exps[None, :, 1]

    def eval(self, x) -> np.ndarray:
        """Shape functions at reference points, shape (npts, n)."""
        return self._monomials(x, self._exps) @ self._coef

    def grad(self, x) -> np.ndarray:
        """Shape-function gradients at reference points, shape (npts, n, 2)."""
        x = np.atleast_2d(x)
        e = self._exps
        ex = np.where(e[:, 0] > 0, e[:, 0], 0)
        ey = np.where(e[:, 1] > 0, e[:, 1], 0)
        dx = e[None, :, 0] * x[:, 0:1] ** np.maximum(ex - 1, 0)[None] * x[:, 1:2] ** e[None, :, 1]
        dy = e[None, :, 1] * x[:, 0:1] ** e[None, :, 0] * x[:, 1:2] ** np.maximum(ey - 1, 0)[None]
        return np.stack([dx @ self._coef, dy @ self._coef], axis=-1)


# ---------------------------------------------------------------------------
# reference mesh


@dataclass
class ReferenceMesh:
    """Conforming order-k triangulation with derived face connectivity.

    `faces[F]` holds the two vertex node ids of face F (smaller id first), `face_elements[F]`
    the adjacent elements (-1 for the missing neighbour of a boundary face).  `elem_faces[e, f]`
    gives the face id of local edge f and `elem_face_flip[e, f]` is True when the local edge runs
    against the face's canonical direction.
    """

    k: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary: np.ndarray  # rows (elem, localface, tag, marker)
    faces: np.ndarray = field(init=False)
    face_elements: np.ndarray = field(init=False)
    face_local: np.ndarray = field(init=False)
    elem_faces: np.ndarray = field(init=False)
    elem_face_flip: np.ndarray = field(init=False)
    boundary_tags: np.ndarray = field(init=False)
    face_markers: np.ndarray = field(init=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.boundary = np.asarray(self.boundary, dtype=np.int64).reshape(-1, 4)
        if self.elements.shape[1] != (self.k + 1) * (self.k + 2) // 2:
            raise MeshError("element node count does not match degree")
        self._build_faces()

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def _build_faces(self):
        k = self.k
        E = self.n_elements
        index: dict[tuple[int, int], int] = {}
        faces, fel, floc = [], [], []
        elem_faces = np.empty((E, 3), dtype=np.int64)
        flip = np.zeros((E, 3), dtype=bool)
        edge_nodes = [edge_local_nodes(k, f) for f in range(3)]
        for e in range(E):
            conn = self.elements[e]
            for f in range(3):
                a, b = int(conn[f]), int(conn[(f + 1) % 3])
                key = (min(a, b), max(a, b))
                F = index.get(key)
                if F is None:
                    F = len(faces)
                    index[key] = F
                    faces.append(key)
                    fel.append([e, -1])
                    floc.append([f, -1])
                else:
                    if fel[F][1] != -1:
                        raise MeshError(f"face {key} shared by more than two elements")
                    e0, f0 = fel[F][0], floc[F][0]
                    mine = conn[edge_nodes[f]]
                    theirs = self.elements[e0][edge_nodes[f0]]
                    if not np.array_equal(mine, theirs[::-1]):
                        raise MeshError(f"nonconforming connectivity between elements {e0} and {e}")
                    fel[F][1] = e
                    floc[F][1] = f
                elem_faces[e, f] = F
                flip[e, f] = a > b
        self.faces = np.array(faces, dtype=np.int64).reshape(-1, 2)
        self.face_elements = np.array(fel, dtype=np.int64).reshape(-1, 2)
        self.face_local = np.array(floc, dtype=np.int64).reshape(-1, 2)
        self.elem_faces = elem_faces
        self.elem_face_flip = flip

        tags = np.zeros(len(faces), dtype=np.int64)
        markers = np.zeros(len(faces), dtype=np.int64)
        for e, f, tag, marker in self.boundary:
            if tag not in (DIRICHLET, NEUMANN, SLIP):
                raise MeshError(f"unknown boundary tag {tag}")
            if not (0 <= e < E and 0 <= f < 3):
                raise MeshError(f"boundary record ({e}, {f}) out of range")
            F = elem_faces[e, f]
            if self.face_elements[F, 1] != -1:
                raise MeshError(f"boundary record ({e}, {f}) refers to an interior face")
            tags[F] = tag
            markers[F] = marker
        untagged = np.flatnonzero((self.face_elements[:, 1] == -1) & (tags == INTERIOR))
        if len(untagged):
            raise MeshError(f"{len(untagged)} boundary faces carry no tag (first: face {untagged[0]})")
        self.boundary_tags = tags
        self.face_markers = markers

    def faces_with(self, tag: int | None = None, marker: int | None = None) -> np.ndarray:
        sel = np.ones(self.n_faces, dtype=bool)
        if tag is not None:
            sel &= self.boundary_tags == tag
        if marker is not None:
            sel &= self.face_markers == marker
        return np.flatnonzero(sel)

    def element_coords(self) -> np.ndarray:
        """Node coordinates per element, shape (E, n, 2)."""
        return self.nodes[self.elements]

    def element_centres(self) -> np.ndarray:
        """Images of the reference centroid under each element's isoparametric map."""
        basis = NodalBasis(self.k)
        N = basis.eval(np.array([[1.0 / 3.0, 1.0 / 3.0]]))[0]
        return np.einsum("a,ead->ed", N, self.element_coords())

    def interface_faces(self, labels: np.ndarray) -> np.ndarray:
        """Interior faces whose two elements carry different region labels."""
        el = self.face_elements
        inner = el[:, 1] >= 0
        diff = np.zeros(self.n_faces, dtype=bool)
        diff[inner] = labels[el[inner, 0]] != labels[el[inner, 1]]
        return np.flatnonzero(diff)


def load_mesh(path) -> ReferenceMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    lines = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, 1):
            text = raw.split("#", 1)[0].strip()
            if text:
                lines.append((lineno, text.split()))
    if not lines:
        raise MeshError(f"{path}: empty mesh file")

    def ints(entry, count=None):
        lineno, toks = entry
        try:
            vals = [int(t) for t in toks]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: expected integers") from None
        if count is not None and len(vals) != count:
            raise MeshError(f"{path}:{lineno}: expected {count} values, got {len(vals)}")
        return vals

    nsd, k, nn, ne, nb = ints(lines[0], 5)
    if nsd != 2:
        raise MeshError(f"{path}:{lines[0][0]}: only nsd=2 is supported")
    if k < 1:
        raise MeshError(f"{path}:{lines[0][0]}: degree must be >= 1")
    if len(lines) < 1 + nn + ne + nb:
        raise MeshError(f"{path}: file ends early (header announces {nn} nodes, {ne} elements, {nb} faces)")
    nodes = np.empty((nn, 2))
    pos = 1
    for i in range(nn):
        lineno, toks = lines[pos + i]
        if len(toks) != 2:
            raise MeshError(f"{path}:{lineno}: expected 2 coordinates")
        try:
            nodes[i] = [float(t) for t in toks]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad coordinate") from None
    pos += nn
    npe = (k + 1) * (k + 2) // 2
    elements = np.array([ints(lines[pos + i], npe) for i in range(ne)], dtype=np.int64).reshape(-1, npe)
    pos += ne
    if elements.size and (elements.min() < 0 or elements.max() >= nn):
        raise MeshError(f"{path}: element node id out of range")
    boundary = []
    for i in range(nb):
        lineno, toks = lines[pos + i]
        vals = ints(lines[pos + i])
        if len(vals) not in (3, 4):
            raise MeshError(f"{path}:{lineno}: expected 'elem localface tag [marker]'")
        if vals[2] not in (DIRICHLET, NEUMANN, SLIP):
            raise MeshError(f"{path}:{lineno}: unknown tag {vals[2]}")
        boundary.append(vals + [0] * (4 - len(vals)))
    mesh = ReferenceMesh(k, nodes, elements, np.array(boundary, dtype=np.int64).reshape(-1, 4))
    bad = np.flatnonzero(jacobian_determinants(mesh).min(axis=1) <= 0)
    if len(bad):
        raise MeshError(f"{path}: element {bad[0]} is inverted or not counter-clockwise")
    return mesh


def save_mesh(mesh: ReferenceMesh, path) -> None:
    with Path(path).open("w") as fh:
        fh.write(f"2 {mesh.k} {len(mesh.nodes)} {mesh.n_elements} {len(mesh.boundary)}\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for conn in mesh.elements:
            fh.write(" ".join(str(int(c)) for c in conn) + "\n")
        for e, f, tag, marker in mesh.boundary:
            fh.write(f"{e} {f} {tag} {marker}\n")


def jacobian_determinants(mesh: ReferenceMesh, degree: int | None = None) -> np.ndarray:
    """det of the isoparametric map at triangle quadrature points, shape (E, nq)."""
    q, _ = triangle_quadrature(degree if degree is not None else 2 * mesh.k + 2)
    dN = NodalBasis(mesh.k).grad(q)
    J = np.einsum("qad,eab->eqdb", dN, mesh.element_coords())
    return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]


# ---------------------------------------------------------------------------
# parametric grids


@dataclass(frozen=True)
class ParametricGrid:
    """Continuous piecewise degree-k Lagrange space on a uniform subdivision of [a, b]."""

    interval: tuple[float, float]
    n_elements: int
    degree: int
    n_quad: int | None = None

    def __post_init__(self):
        a, b = map(float, self.interval)
        if not b > a:
            raise ValueError("empty parametric interval")
        if self.n_elements < 1 or self.degree < 1:
            raise ValueError("n_elements and degree must be >= 1")
        object.__setattr__(self, "interval", (a, b))
        nq = self.n_quad if self.n_quad is not None else self.degree + 1
        object.__setattr__(self, "n_quad", nq)
        ref = fekete_nodes_1d(self.degree)
        edges = np.linspace(a, b, self.n_elements + 1)
        h = np.diff(edges)
        k = self.degree
        nodes = np.empty(self.n_elements * k + 1)
        conn = np.empty((self.n_elements, k + 1), dtype=np.int64)
        for e in range(self.n_elements):
            nodes[e * k:(e + 1) * k + 1] = edges[e] + 0.5 * (ref + 1.0) * h[e]
            conn[e] = np.arange(e * k, (e + 1) * k + 1)
        nodes[-1] = b
        gx, gw = gauss_quadrature_1d(nq)
        qp = (edges[:-1, None] + 0.5 * (gx[None, :] + 1.0) * h[:, None])
        qw = 0.5 * h[:, None] * gw[None, :]
        B = np.zeros((self.n_elements * nq, len(nodes)))
        Nloc = lagrange_1d(ref, gx)
        for e in range(self.n_elements):
            B[e * nq:(e + 1) * nq, conn[e]] = Nloc
        object.__setattr__(self, "_ref", ref)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "connectivity", conn)
        object.__setattr__(self, "quad_points", qp.ravel())
        object.__setattr__(self, "quad_weights", qw.ravel())
        object.__setattr__(self, "quad_element", np.repeat(np.arange(self.n_elements), nq))
        object.__setattr__(self, "basis_at_quad", B)

    @property
    def n_nodes(self) -> int:
        return self.n_elements * self.degree + 1

    def check(self, mu, tol: float = 1e-12) -> np.ndarray:
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        a, b = self.interval
        if np.any(mu < a - tol * max(1.0, abs(a))) or np.any(mu > b + tol * max(1.0, abs(b))):
            raise ValueError(f"parameter value outside [{a}, {b}]")
        return np.clip(mu, a, b)

    def basis_at(self, mu) -> np.ndarray:
        """Interpolation matrix from nodal values to the points mu, shape (len(mu), n_nodes)."""
        mu = self.check(mu)
        e = np.clip(np.searchsorted(self.edges, mu, side="right") - 1, 0, self.n_elements - 1)
        h = self.edges[e + 1] - self.edges[e]
        s = 2.0 * (mu - self.edges[e]) / h - 1.0
        out = np.zeros((len(mu), self.n_nodes))
        for i in range(len(mu)):
            out[i, self.connectivity[e[i]]] = lagrange_1d(self._ref, s[i:i + 1])[0]
        return out

    def interpolate(self, values: np.ndarray, mu) -> np.ndarray:
        return self.basis_at(mu) @ values

    def mass(self, weight: np.ndarray | None = None) -> np.ndarray:
        """Matrix of integrals of N_a * w * N_b with w given at the quadrature points."""
        w = self.quad_weights if weight is None else self.quad_weights * weight
        B = self.basis_at_quad
        return B.T @ (w[:, None] * B)

    def load(self, weight: np.ndarray | None = None) -> np.ndarray:
        w = self.quad_weights if weight is None else self.quad_weights * weight
        return self.basis_at_quad.T @ w

    def coarse_indices(self, degree: int) -> np.ndarray:
        """Indices of the nodes of the same subdivision at a lower degree (must be nested)."""
        if degree == self.degree:
            return np.arange(self.n_nodes)
        sub = ParametricGrid(self.interval, self.n_elements, degree)
        idx = np.searchsorted(self.nodes, sub.nodes)
        idx = np.clip(idx, 0, self.n_nodes - 1)
        for j, x in enumerate(sub.nodes):
            cand = [i for i in (idx[j] - 1, idx[j], idx[j] + 1) if 0 <= i < self.n_nodes]
            best = min(cand, key=lambda i: abs(self.nodes[i] - x))
            if abs(self.nodes[best] - x) > 1e-12 * max(1.0, abs(x)):
                raise ValueError(f"degree-{degree} nodes are not a subset of the degree-{self.degree} nodes")
            idx[j] = best
        return idx
