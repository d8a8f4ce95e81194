"""Shared builders for the test suite: small mapped problems, manufactured data and swimmer studies."""

from __future__ import annotations

import numpy as np

from pgdflow.analysis import (
    FieldNorm,
    ReferenceCache,
    error_report,
    parametric_quadrature,
)
from pgdflow.aposteriori import (
    AposterioriConfig,
    SnapshotPlan,
    SnapshotTensor,
    compute_snapshots,
    run_aposteriori,
)
from pgdflow.apriori import AprioriConfig, run_apriori
from pgdflow.hdg import (
    DIRICHLET,
    NEUMANN,
    DataTerm,
    HDGSystem,
    StokesProblem,
    constant_vector,
    drag_functional,
    surface_faces,
)
from pgdflow.mapping import (
    MappingTerm,
    SeparatedMapping,
    SwimmerGeometry,
    swimmer_mapping,
)
from pgdflow.mesh import ParametricGrid
from pgdflow.meshgen import (
    DESK,
    INLET,
    SPHERE_MINUS,
    SPHERE_PLUS,
    rectangle_mesh,
    swimmer_mesh,
)
from pgdflow.paramfunc import ParamFunction

PI = np.pi


# ---------------------------------------------------------------------------
# small parametrised channel


def _identity(x, labels):
    return x.copy(), np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()


def _bulge_x(x, labels):
    """(0.2 x^2, 0): stretches the channel towards the outlet."""
    M = np.column_stack([0.2 * x[:, 0] ** 2, np.zeros(len(x))])
    J = np.zeros((len(x), 2, 2))
    J[:, 0, 0] = 0.4 * x[:, 0]
    return M, J


def _shear_y(x, labels):
    """(0, 0.2 x y): opens the channel height along x."""
    M = np.column_stack([np.zeros(len(x)), 0.2 * x[:, 0] * x[:, 1]])
    J = np.zeros((len(x), 2, 2))
    J[:, 0, 1] = 0.2 * x[:, 1]
    J[:, 1, 1] = 0.2 * x[:, 0]
    return M, J


def channel_mapping(n_params: int) -> SeparatedMapping:
    """Identity plus one or two smooth deformations with nonlinear parameter factors."""
    terms = [MappingTerm("x", _identity, ParamFunction.const(n_params), identity=True)]
    terms.append(MappingTerm("bulge", _bulge_x, ParamFunction.of(n_params, 0, lambda m: 1.0 + 0.5 * m)))
    if n_params == 2:
        terms.append(MappingTerm("shear", _shear_y, ParamFunction.of(n_params, 1, lambda m: np.exp(0.5 * m))))
    return SeparatedMapping(tuple(terms), n_params, 1, lambda x: np.zeros(len(np.atleast_2d(x)), dtype=np.int64),
                            ((-1.0, 1.0),) * n_params, f"channel{n_params}")


def channel_system(n_params: int = 1, k: int = 2, nx: int = 3, ny: int = 2, inlet_factor=None) -> HDGSystem:
    """Parabolic inflow on the left, no-slip walls, free outflow on the right."""
    mesh = rectangle_mesh(k, nx, ny, (0.0, 1.0, 0.0, 1.0),
                          sides={"left": (DIRICHLET, 1), "right": (NEUMANN, 2), "bottom": (DIRICHLET, 3),
                                 "top": (DIRICHLET, 3)})
    inflow = DataTerm(lambda x: np.column_stack([4 * x[:, 1] * (1 - x[:, 1]), 0 * x[:, 0]]), inlet_factor, (1,))
    return HDGSystem(mesh, StokesProblem(0.5, dirichlet=(inflow,)), channel_mapping(n_params))


def frozen_operator(system: HDGSystem, mu):
    """Independent assembly of K(mu) and F(mu): freeze the mapping and the data, then build a fresh system."""
    mp = system.mapping
    for v in mu:
        mp = mp.freeze(0, float(v))
    pb = system.problem

    def frz(term):
        f = term.factor
        if f is None:
            return term
        for v in mu:
            f = f.freeze(0, float(v))
        return DataTerm(term.func, f, term.markers)

    pb2 = StokesProblem(pb.nu, tuple(frz(t) for t in pb.dirichlet), tuple(frz(t) for t in pb.neumann),
                        tuple(frz(t) for t in pb.source), pb.tau_scale, pb.length)
    fr = HDGSystem(system.mesh, pb2, mp, labels=system.labels)
    w = fr.weights_at(())
    K = sum(wt * fr.matrix(t) for t, wt in enumerate(w))
    return K, fr.rhs_at(())


# ---------------------------------------------------------------------------
# manufactured Stokes solution on the unit square


def exact_velocity(x):
    X, Y = x[..., 0], x[..., 1]
    return np.stack([np.sin(PI * X) * np.cos(PI * Y), -np.cos(PI * X) * np.sin(PI * Y)], -1)


def exact_pressure(x):
    return np.cos(PI * x[..., 0]) * np.cos(PI * x[..., 1])


def exact_grad(x):
    """[..., i, j] = d u_j / d x_i."""
    X, Y = x[..., 0], x[..., 1]
    c, s = np.cos, np.sin
    row0 = np.stack([PI * c(PI * X) * c(PI * Y), PI * s(PI * X) * s(PI * Y)], -1)
    row1 = np.stack([-PI * s(PI * X) * s(PI * Y), -PI * c(PI * X) * c(PI * Y)], -1)
    return np.stack([row0, row1], -2)


def manufactured_source(nu):
    def src(x):
        gp = np.stack([-PI * np.sin(PI * x[:, 0]) * np.cos(PI * x[:, 1]),
                       -PI * np.cos(PI * x[:, 0]) * np.sin(PI * x[:, 1])], -1)
        return nu * 2 * PI ** 2 * exact_velocity(x) + gp
    return src


def manufactured_errors(k: int, n: int, nu: float = 0.7):
    """L2 errors of u, p and L on an n x n square mesh of degree k."""
    mesh = rectangle_mesh(k, n, n)
    pb = StokesProblem(nu, dirichlet=(DataTerm(exact_velocity),), source=(DataTerm(manufactured_source(nu)),))
    s = HDGSystem(mesh, pb)
    sol = s.solve_at(())
    g = s.geo
    uh = np.einsum("qa,eja->eqj", g.N, sol.u)
    ph = np.einsum("qa,ea->eq", g.N, sol.p)
    Lh = np.einsum("qa,eija->eqij", g.N, sol.L)
    eu = np.sqrt((g.wq[..., None] * (uh - exact_velocity(g.xq)) ** 2).sum())
    ep = np.sqrt((g.wq * (ph - exact_pressure(g.xq)) ** 2).sum())
    eL = np.sqrt((g.wq[..., None, None] * (Lh + nu * exact_grad(g.xq)) ** 2).sum())
    return np.array([eu, ep, eL])


def observed_orders(k: int, levels=(4, 8, 16, 32), nu: float = 0.7):
    errs = np.array([manufactured_errors(k, n, nu) for n in levels])
    return np.log2(errs[:-1] / errs[1:]), errs


# ---------------------------------------------------------------------------
# swimmer studies


class SwimmerStudy:
    """One swimmer configuration with cached references and PGD runs."""

    def __init__(self, kind: str, interval, n_elements: int, mesh=None, param_degree: int = 4, param_quad: int = 8):
        self.mesh = mesh if mesh is not None else swimmer_mesh(3, DESK)
        geom = SwimmerGeometry()
        self.mapping = swimmer_mapping(kind, geom, None if kind == "radius" else interval, self.mesh.nodes)
        pb = StokesProblem(1.0, dirichlet=(DataTerm(constant_vector([1.0, 0.0]), markers=(INLET,)),))
        self.system = HDGSystem(self.mesh, pb, self.mapping)
        self.grid = ParametricGrid(tuple(interval), n_elements, param_degree, param_quad)
        self.grids = (self.grid,)
        self.quad = parametric_quadrature(self.grids)
        self.cache = ReferenceCache(self.system.solve_at)
        self.norm = FieldNorm(self.system.geo)
        self.drag = drag_functional(self.system, surface_faces(self.mesh, [SPHERE_MINUS, SPHERE_PLUS]))
        self.drag_minus = drag_functional(self.system, surface_faces(self.mesh, [SPHERE_MINUS]))
        self.drag_plus = drag_functional(self.system, surface_faces(self.mesh, [SPHERE_PLUS]))
        self._apriori = {}
        self._aposteriori = {}
        self._tensors = {}

    def apriori(self, n_i: int, max_modes: int = 30, eta_star: float = 1e-12):
        key = (n_i, max_modes, eta_star)
        if key not in self._apriori:
            before = self.system.n_solves
            sol = run_apriori(self.system, self.grids, AprioriConfig(eta_star=eta_star, n_i=n_i, max_modes=max_modes))
            report = error_report(sol, self.cache, self.quad, self.norm, self.drag, "apriori", f"n_i={n_i}")
            self._apriori[key] = (sol, report, before)
        return self._apriori[key]

    def tensor(self, level: str):
        """Snapshot tensor of one level and the full-order solves it needs.

        Coarser levels are nested in the finest one, so they are sliced from it instead of being
        recomputed; the reported count is still the number of snapshots of the level itself.
        """
        plan = SnapshotPlan.uniform(self.grids, level)
        if "all" not in self._tensors:
            full = SnapshotPlan.uniform(self.grids, "all")
            before = self.system.n_solves
            data = compute_snapshots(full, self.system)
            assert self.system.n_solves - before == full.n_s
            self._tensors["all"] = data
        full = self._tensors["all"]
        idx = np.ix_(*plan.indices)
        sub = SnapshotTensor(full.data[(slice(None),) + idx], plan.coords())
        return plan, sub, plan.n_s

    def aposteriori(self, level: str, eta_star: float = 1e-10):
        if level not in self._aposteriori:
            plan, tensor, n_s = self.tensor(level)
            before = self.system.n_solves
            sol = run_aposteriori(tensor, AposterioriConfig(eta_star=eta_star), plan.sub_grids, self.system.layout, n_s)
            assert self.system.n_solves == before
            report = error_report(sol, self.cache, self.quad, self.norm, self.drag, "aposteriori", f"n_s={plan.n_s}")
            self._aposteriori[level] = (sol, report, plan)
        return self._aposteriori[level]


# ---------------------------------------------------------------------------
# acceptance log

ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


def record(key: str, label: str, ok: bool, detail: str = "") -> bool:
    """Log one acceptance check; conftest prints the per-criterion verdicts at the end of the run."""
    ACCEPTANCE.setdefault(key, []).append((label, bool(ok), detail))
    print(f"[{key}] {'PASS' if ok else 'FAIL'} {label} {detail}")
    return bool(ok)
