"""Separated geometric mappings, their Jacobians and the two-sphere swimmer family.

Jacobians use the gradient convention J[i, j] = d M_j / d x_i.  With it, adj(J) = det(J) J^{-1}
turns reference gradients and reference normals into their mapped, measure-weighted
counterparts: det * grad_mapped f = adj @ grad f and n_mapped ds_mapped = adj @ n ds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .mesh import NodalBasis, ReferenceMesh, triangle_quadrature
from .paramfunc import ParamFunction

FieldFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


class NonSeparableError(ValueError):
    pass


@dataclass(frozen=True)
class MappingTerm:
    """One spatial term M^k with its Jacobian field and parametric factor.

    `field(x, labels)` returns (M, J) at points x (npts, 2) lying in regions `labels`.
    `jac_support` lists the region labels where J may be nonzero (None: all regions).
    """

    name: str
    field: FieldFn
    factor: ParamFunction
    jac_support: frozenset | None = None
    identity: bool = False


@dataclass(frozen=True)
class SeparatedMapping:
    terms: tuple[MappingTerm, ...]
    n_params: int
    n_regions: int
    classify: Callable[[np.ndarray], np.ndarray]
    intervals: tuple[tuple[float, float], ...] = ()
    name: str = "mapping"

    @property
    def n_M(self) -> int:
        return len(self.terms)

    def check_mu(self, mu) -> np.ndarray:
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape != (self.n_params,):
            raise ValueError(f"{self.name}: expected {self.n_params} parameter values, got {mu.shape}")
        for j, (a, b) in enumerate(self.intervals):
            tol = 1e-12 * max(1.0, abs(a), abs(b))
            if not (a - tol <= mu[j] <= b + tol):
                raise ValueError(f"{self.name}: parameter {j + 1} = {mu[j]} outside [{a}, {b}]")
        return mu

    def _labels(self, x, labels):
        return self.classify(x) if labels is None else np.broadcast_to(labels, (len(x),))

    def factors(self, mu) -> np.ndarray:
        mu = self.check_mu(mu)
        return np.array([t.factor(mu) for t in self.terms])

    def term_fields(self, x, labels=None) -> tuple[np.ndarray, np.ndarray]:
        """Spatial terms at x: M of shape (n_M, npts, 2) and J of shape (n_M, npts, 2, 2)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lab = self._labels(x, labels)
        Ms, Js = zip(*(t.field(x, lab) for t in self.terms))
        return np.array(Ms), np.array(Js)

    def evaluate(self, x, mu, labels=None) -> np.ndarray:
        phi = self.factors(mu)
        M, _ = self.term_fields(x, labels)
        return np.einsum("k,kpd->pd", phi, M)

    def jacobian(self, x, mu, labels=None) -> np.ndarray:
        phi = self.factors(mu)
        _, J = self.term_fields(x, labels)
        return np.einsum("k,kpij->pij", phi, J)

    def freeze(self, j: int, value: float) -> "SeparatedMapping":
        """Fix parameter j at `value`, leaving a mapping of the remaining parameters."""
        self.check_mu(np.array([value if i == j else sum(self.intervals[i]) / 2 for i in range(self.n_params)]))
        terms = tuple(replace(t, factor=t.factor.freeze(j, value)) for t in self.terms)
        ivals = self.intervals[:j] + self.intervals[j + 1:]
        return replace(self, terms=terms, n_params=self.n_params - 1, intervals=ivals,
                       name=f"{self.name}[mu{j + 1}={value:g}]")


# ---------------------------------------------------------------------------
# identity and composition


def _identity_field(x, labels):
    n = len(x)
    return x.copy(), np.broadcast_to(np.eye(2), (n, 2, 2)).copy()


def identity_mapping() -> SeparatedMapping:
    term = MappingTerm("x", _identity_field, ParamFunction.const(0), None, identity=True)
    return SeparatedMapping((term,), 0, 1, lambda x: np.zeros(len(np.atleast_2d(x)), dtype=np.int64), (), "identity")


def _is_identity(m: SeparatedMapping) -> bool:
    return m.n_params == 0 and m.n_M == 1 and m.terms[0].identity and m.terms[0].factor.scale == 1.0


def compose_mappings(a: SeparatedMapping, b: SeparatedMapping, sample_points=None,
                     tol: float = 1e-12, resep_tol: float | None = None, seed: int = 0) -> SeparatedMapping:
    """Separated form of x -> b(a(x)); parameters of a come first.

    Terms of b flagged as identity absorb all of a's terms; every other term of b must be
    invariant under a (b's spatial term takes the same value at a(x) and at x, and a does not
    move points across b's regions).  That is verified on `sample_points` at random parameters;
    a violation larger than `tol` raises NonSeparableError unless it stays below `resep_tol`.
    """
    if _is_identity(a):
        return b
    if _is_identity(b):
        return a
    nA, nB = a.n_params, b.n_params
    if sample_points is not None:
        rng = np.random.default_rng(seed)
        x = np.atleast_2d(np.asarray(sample_points, dtype=float))
        la = a.classify(x)
        lb = b.classify(x)
        limit = tol if resep_tol is None else max(tol, resep_tol)
        for _ in range(4):
            mu = np.array([rng.uniform(lo, hi) for lo, hi in a.intervals])
            y = a.evaluate(x, mu, la)
            if np.any(b.classify(y) != lb):
                raise NonSeparableError("mapping moves points across regions of the second mapping")
            for t in b.terms:
                if t.identity:
                    continue
                My, _ = t.field(y, lb)
                Mx, _ = t.field(x, lb)
                err = np.max(np.abs(My - Mx)) if len(x) else 0.0
                if err > limit:
                    raise NonSeparableError(f"term {t.name} of {b.name} is not invariant under {a.name} (mismatch {err:.3e})")

    nRb = b.n_regions

    def lift_a(fn):
        return lambda x, lab: fn(x, lab // nRb)

    def lift_b(fn):
        return lambda x, lab: fn(x, lab % nRb)

    def lift_support(sup, which):
        if sup is None:
            return None
        if which == "a":
            return frozenset(la * nRb + lb for la in sup for lb in range(nRb))
        return frozenset(la * nRb + lb for la in range(a.n_regions) for lb in sup)

    terms = []
    for tb in b.terms:
        fb = tb.factor.extend(before=nA)
        if tb.identity:
            for ta in a.terms:
                terms.append(MappingTerm(f"{ta.name}*{tb.name}", lift_a(ta.field), ta.factor.extend(after=nB) * fb,
                                         lift_support(ta.jac_support, "a"), identity=ta.identity))
        else:
            terms.append(MappingTerm(tb.name, lift_b(tb.field), ParamFunction.const(nA + nB) * fb,
                                     lift_support(tb.jac_support, "b")))

    def classify(x):
        return a.classify(x) * nRb + b.classify(x)

    return SeparatedMapping(tuple(terms), nA + nB, a.n_regions * nRb, classify,
                            tuple(a.intervals) + tuple(b.intervals), f"{b.name}o{a.name}")


# ---------------------------------------------------------------------------
# Jacobian separation


def mixed_det(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Symmetric bilinear form with mixed_det(A, A) = det(A) for stacks of 2x2 matrices."""
    return 0.5 * (A[..., 0, 0] * B[..., 1, 1] + B[..., 0, 0] * A[..., 1, 1]
                  - A[..., 0, 1] * B[..., 1, 0] - B[..., 0, 1] * A[..., 1, 0])


def adjugate(A: np.ndarray) -> np.ndarray:
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1]
    out[..., 1, 1] = A[..., 0, 0]
    out[..., 0, 1] = -A[..., 0, 1]
    out[..., 1, 0] = -A[..., 1, 0]
    return out


@dataclass(frozen=True)
class DetTerm:
    i: int
    j: int
    factor: ParamFunction
    support: frozenset | None


@dataclass(frozen=True)
class AdjTerm:
    k: int
    factor: ParamFunction
    support: frozenset | None


def _meet(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a & b


@dataclass(frozen=True)
class SeparatedJacobian:
    """det(J) = sum_t D^t theta^t and adj(J) = sum_k A^k vartheta^k built from the mapping's terms."""

    mapping: SeparatedMapping
    det_terms: tuple[DetTerm, ...] = field(init=False)
    adj_terms: tuple[AdjTerm, ...] = field(init=False)

    def __post_init__(self):
        terms = self.mapping.terms
        dets, adjs = [], []
        for i, ti in enumerate(terms):
            adjs.append(AdjTerm(i, ti.factor, ti.jac_support))
            for j in range(i, len(terms)):
                tj = terms[j]
                dets.append(DetTerm(i, j, ti.factor * tj.factor, _meet(ti.jac_support, tj.jac_support)))
        object.__setattr__(self, "det_terms", tuple(dets))
        object.__setattr__(self, "adj_terms", tuple(adjs))

    @property
    def n_params(self) -> int:
        return self.mapping.n_params

    def det_fields(self, x, labels=None) -> np.ndarray:
        """Spatial det terms D^t at x, shape (n_d, npts)."""
        _, J = self.mapping.term_fields(x, labels)
        return np.array([(2.0 - (t.i == t.j)) * mixed_det(J[t.i], J[t.j]) for t in self.det_terms])

    def adj_fields(self, x, labels=None) -> np.ndarray:
        """Spatial adjugate terms A^k at x, shape (n_a, npts, 2, 2)."""
        _, J = self.mapping.term_fields(x, labels)
        return adjugate(J)

    def det_factors(self, mu) -> np.ndarray:
        mu = self.mapping.check_mu(mu)
        return np.array([t.factor(mu) for t in self.det_terms])

    def adj_factors(self, mu) -> np.ndarray:
        mu = self.mapping.check_mu(mu)
        return np.array([t.factor(mu) for t in self.adj_terms])

    def det(self, x, mu, labels=None) -> np.ndarray:
        return self.det_factors(mu) @ self.det_fields(x, labels)

    def adj(self, x, mu, labels=None) -> np.ndarray:
        return np.einsum("k,kpij->pij", self.adj_factors(mu), self.adj_fields(x, labels))


def separate_det_adj(m: SeparatedMapping, nsd: int = 2) -> SeparatedJacobian:
    if nsd != 2:
        raise NotImplementedError("only two-dimensional mappings are supported")
    return SeparatedJacobian(m)


# ---------------------------------------------------------------------------
# swimmer geometry


@dataclass(frozen=True)
class SwimmerGeometry:
    L: float = 6.0
    H: float = 2.0
    x0: float = 1.5
    R_ref: float = 0.116
    R_out: float = 0.45
    R_int: float = 0.47
    radius_interval: tuple[float, float] = (-1.0, 1.0)
    distance_interval: tuple[float, float] = (-2.0, -1.0)

    def __post_init__(self):
        if not (0 < self.R_ref < self.R_out < self.R_int < self.x0 - self.R_int):
            raise ValueError("swimmer radii must satisfy R_ref < R_out < R_int < gaps of the layout")

    def radius_plus(self, mu1):
        mu1 = np.asarray(mu1, dtype=float)
        return -0.0372 * mu1 ** 2 + 0.0968 * mu1 + 0.25

    def radius_minus(self, mu1):
        return np.cbrt(1.0 / 32.0 - self.radius_plus(mu1) ** 3)


def _radial_terms(c: np.ndarray, R_out: float):
    """Fields (x-c)/r and x-c restricted to the disk labelled `lab`."""

    def unit(lab_on):
        def fn(x, lab):
            d = x - c
            r = np.linalg.norm(d, axis=1)
            on = lab == lab_on
            r = np.where(on & (r > 0), r, 1.0)
            M = np.where(on[:, None], d / r[:, None], 0.0)
            e = d / r[:, None]
            J = (np.eye(2)[None] - e[:, :, None] * e[:, None, :]) / r[:, None, None]
            return M, np.where(on[:, None, None], J, 0.0)
        return fn

    def shift(lab_on):
        def fn(x, lab):
            on = lab == lab_on
            M = np.where(on[:, None], x - c, 0.0)
            J = np.where(on[:, None, None], np.eye(2)[None], 0.0)
            return M, J
        return fn

    return unit, shift


def radius_mapping(geom: SwimmerGeometry = SwimmerGeometry()) -> SeparatedMapping:
    """Radii R+ (sphere at +x0) and R- (sphere at -x0) driven by one parameter.

    Labels: 0 outside both R_out disks, 1 disk around +x0, 2 disk around -x0.  The term carrying
    the constant centre on disk 1 also carries the identity outside both disks.
    """
    g = geom
    cp, cm = np.array([g.x0, 0.0]), np.array([-g.x0, 0.0])
    den = g.R_out - g.R_ref

    def classify(x):
        x = np.atleast_2d(x)
        lab = np.zeros(len(x), dtype=np.int64)
        lab[np.linalg.norm(x - cp, axis=1) <= g.R_out + 1e-12] = 1
        lab[np.linalg.norm(x - cm, axis=1) <= g.R_out + 1e-12] = 2
        return lab

    unit_p, shift_p = _radial_terms(cp, g.R_out)
    unit_m, shift_m = _radial_terms(cm, g.R_out)

    def centre_or_identity(x, lab):
        M = np.where((lab == 1)[:, None], cp[None, :], np.where((lab == 0)[:, None], x, 0.0))
        J = np.where((lab == 0)[:, None, None], np.eye(2)[None], 0.0)
        return M, J

    def minus_centre(x, lab):
        M = np.where((lab == 2)[:, None], cm[None, :], 0.0)
        return M, np.zeros((len(x), 2, 2))

    P = lambda fn: ParamFunction.of(1, 0, fn)  # noqa: E731
    terms = (
        MappingTerm("unit+", unit_p(1), P(lambda m: g.R_out * (g.radius_plus(m) - g.R_ref) / den), frozenset({1})),
        MappingTerm("shift+", shift_p(1), P(lambda m: (g.R_out - g.radius_plus(m)) / den), frozenset({1})),
        MappingTerm("centre+", centre_or_identity, ParamFunction.const(1), frozenset({0})),
        MappingTerm("unit-", unit_m(2), P(lambda m: g.R_out * (g.radius_minus(m) - g.R_ref) / den), frozenset({2})),
        MappingTerm("shift-", shift_m(2), P(lambda m: (g.R_out - g.radius_minus(m)) / den), frozenset({2})),
        MappingTerm("centre-", minus_centre, ParamFunction.const(1), frozenset()),
    )
    return SeparatedMapping(terms, 1, 3, classify, (tuple(g.radius_interval),), "radius")


def distance_mapping(geom: SwimmerGeometry = SwimmerGeometry(), interval=None) -> SeparatedMapping:
    """Sphere centres at +-(x0 - x0 mu / 3) by a piecewise-linear horizontal stretch.

    Labels are the five vertical strips separated by x = -x0-R_int, -x0+R_int, x0-R_int, x0+R_int.
    """
    g = geom
    cuts = np.array([-g.x0 - g.R_int, -g.x0 + g.R_int, g.x0 - g.R_int, g.x0 + g.R_int])
    s_out = g.x0 + g.R_int - g.L
    s_mid = g.x0 - g.R_int

    def classify(x):
        x = np.atleast_2d(x)
        return np.searchsorted(cuts, x[:, 0], side="right").astype(np.int64)

    def stretch(x, lab):
        X = x[:, 0]
        d = np.select([lab == 0, lab == 1, lab == 2, lab == 3, lab == 4],
                      [(X + g.L) / s_out, -np.ones_like(X), X / s_mid, np.ones_like(X), (X - g.L) / s_out])
        dd = np.select([lab == 0, lab == 2, lab == 4], [np.full_like(X, 1 / s_out), np.full_like(X, 1 / s_mid),
                                                         np.full_like(X, 1 / s_out)], 0.0)
        M = np.column_stack([d, np.zeros_like(X)])
        J = np.zeros((len(x), 2, 2))
        J[:, 0, 0] = dd
        return M, J

    terms = (
        MappingTerm("stretch", stretch, ParamFunction.of(1, 0, lambda m: -g.x0 * np.asarray(m) / 3.0),
                    frozenset({0, 2, 4})),
        MappingTerm("x", _identity_field, ParamFunction.const(1), None, identity=True),
    )
    ival = tuple(interval) if interval is not None else tuple(g.distance_interval)
    return SeparatedMapping(terms, 1, 5, classify, (ival,), "distance")


def swimmer_mapping(kind: str, geom: SwimmerGeometry = SwimmerGeometry(), distance_interval=None,
                    sample_points=None) -> SeparatedMapping:
    """'radius', 'distance' (equal spheres of radius 0.25 at mu1 = 0) or 'both'."""
    if kind == "radius":
        return radius_mapping(geom)
    dist = distance_mapping(geom, distance_interval)
    if kind == "distance":
        return compose_mappings(radius_mapping(geom).freeze(0, 0.0), dist, sample_points)
    if kind == "both":
        return compose_mappings(radius_mapping(geom), dist, sample_points)
    raise ValueError(f"unknown mapping kind {kind!r}")


# ---------------------------------------------------------------------------
# quality


def scaled_jacobian_quality(mesh: ReferenceMesh, m: SeparatedMapping, mu, labels=None, degree=None) -> np.ndarray:
    """Per element: min over quadrature points of det(J_mu J_iso) divided by its element mean."""
    q, w = triangle_quadrature(degree if degree is not None else 2 * mesh.k + 2)
    basis = NodalBasis(mesh.k)
    X = mesh.element_coords()
    xq = np.einsum("qa,ead->eqd", basis.eval(q), X)
    Jiso = np.einsum("qai,eaj->eqij", basis.grad(q), X)
    if labels is None:
        labels = m.classify(mesh.element_centres())
    E, nq = xq.shape[:2]
    lab = np.repeat(labels, nq)
    Jm = m.jacobian(xq.reshape(-1, 2), mu, lab).reshape(E, nq, 2, 2)
    d = np.linalg.det(Jiso) * np.linalg.det(Jm)
    mean = (d * w).sum(axis=1) / w.sum()
    return d.min(axis=1) / np.maximum(np.abs(mean), 1e-300)
