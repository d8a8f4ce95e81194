"""Error measures over the parametric box, drag response surfaces and method comparison tables."""

from __future__ import annotations

import csv
import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .hdg import FullOrderSolution, Geometry, Layout
from .mesh import gauss_quadrature_1d
from .separated import SeparatedSolution

ERROR_VARIABLES = ("u", "p", "L")
DRAG_TARGETS = (1e-2, 1e-3, 1e-5)


# ---------------------------------------------------------------------------
# parametric quadrature


@dataclass(frozen=True)
class ParametricQuadrature:
    """Tensor Gauss rule on the parametric box; element_ids[q] is the multi-index of the cell of q."""

    points: np.ndarray  # (nq, n_params)
    weights: np.ndarray  # (nq,)
    element_ids: np.ndarray  # (nq, n_params)
    shape: tuple[int, ...]  # parametric cells per axis

    @property
    def n_points(self) -> int:
        return len(self.weights)

    def cell_index(self) -> np.ndarray:
        """Flat row-major cell number of every point."""
        return np.ravel_multi_index(tuple(self.element_ids.T), self.shape) if self.shape else \
            np.zeros(self.n_points, dtype=np.int64)


def parametric_quadrature(grids, n_points: int | None = None) -> ParametricQuadrature:
    """Gauss rule with n_points per parametric element (default degree + 1) on every axis."""
    axes = []
    for g in grids:
        npt = n_points if n_points is not None else g.degree + 1
        x, w = gauss_quadrature_1d(npt)
        e = g.edges
        h = np.diff(e)
        pts = (e[:-1, None] + 0.5 * (x[None, :] + 1.0) * h[:, None]).ravel()
        wts = (0.5 * h[:, None] * w[None, :]).ravel()
        ids = np.repeat(np.arange(g.n_elements), npt)
        axes.append((pts, wts, ids))
    if not axes:
        return ParametricQuadrature(np.zeros((1, 0)), np.ones(1), np.zeros((1, 0), dtype=np.int64), ())
    P, W, I = [], [], []
    for combo in itertools.product(*(range(len(a[0])) for a in axes)):
        P.append([a[0][i] for a, i in zip(axes, combo)])
        W.append(np.prod([a[1][i] for a, i in zip(axes, combo)]))
        I.append([a[2][i] for a, i in zip(axes, combo)])
    return ParametricQuadrature(np.array(P), np.array(W), np.array(I, dtype=np.int64),
                                tuple(g.n_elements for g in grids))


# ---------------------------------------------------------------------------
# reference solutions


class ReferenceCache:
    """Full-order solutions keyed by parameter value, computed on demand (optionally in parallel)."""

    def __init__(self, solver: Callable, threads: int = 1):
        self._solver = solver
        self.threads = max(1, int(threads))
        self._store: dict[tuple, np.ndarray] = {}
        self._lock = threading.Lock()
        self.n_solves = 0

    @staticmethod
    def key(mu) -> tuple:
        return tuple(round(float(v), 13) for v in np.atleast_1d(mu))

    def _solve(self, mu) -> np.ndarray:
        try:
            out = self._solver(tuple(np.atleast_1d(mu).tolist()))
        except Exception as exc:
            raise RuntimeError(f"reference solve at mu={tuple(np.atleast_1d(mu))} failed: {exc}") from exc
        x = out.vector() if isinstance(out, FullOrderSolution) else np.asarray(out, dtype=float)
        with self._lock:
            self.n_solves += 1
        return x

    def get(self, mu) -> np.ndarray:
        k = self.key(mu)
        if k not in self._store:
            self._store[k] = self._solve(mu)
        return self._store[k]

    def get_many(self, points) -> list[np.ndarray]:
        points = [tuple(np.atleast_1d(p).tolist()) for p in points]
        todo = list(dict.fromkeys(self.key(p) for p in points if self.key(p) not in self._store))
        if todo:
            if self.threads > 1:
                with ThreadPoolExecutor(self.threads) as pool:
                    vals = list(pool.map(self._solve, todo))
            else:
                vals = [self._solve(p) for p in todo]
            self._store.update(zip(todo, vals))
        return [self._store[self.key(p)] for p in points]


# ---------------------------------------------------------------------------
# spatial L2 norms


class FieldNorm:
    """Maps stacked solution vectors to sqrt(weight)-scaled quadrature values of u, p and L.

    The Euclidean norm of the mapped vector is the L2 norm of the field on the reference domain.
    """

    def __init__(self, geo: Geometry):
        self.geo = geo
        self.layout: Layout = geo.layout
        self._sw = np.sqrt(geo.wq)  # (E, nq)

    def values(self, X: np.ndarray, var: str) -> np.ndarray:
        """X has shape (size,) or (size, m); returns (n_values,) or (n_values, m)."""
        lay = self.layout
        E, n = lay.n_elements, lay.n_local
        X2 = X.reshape(lay.size, -1)
        m = X2.shape[1]
        blk = X2[lay.slices()[var]]
        comps = {"u": 2, "p": 1, "L": 4}[var]
        C = blk.reshape(E, comps, n, m)
        V = np.einsum("qa,ecam->ecqm", self.geo.N, C) * self._sw[:, None, :, None]
        V = V.reshape(-1, m)
        return V[:, 0] if X.ndim == 1 else V


def multidim_l2_error(sol: SeparatedSolution, reference, quad: ParametricQuadrature, norm: FieldNorm,
                      modes=None) -> dict[str, np.ndarray]:
    """E_u, E_p, E_L for the truncations to each mode count in `modes` (default 1..n_modes).

    `reference` is a ReferenceCache or any callable returning a full-order solution at mu.
    """
    cache = reference if isinstance(reference, ReferenceCache) else ReferenceCache(reference)
    modes = list(range(1, sol.n_modes + 1)) if modes is None else list(modes)
    refs = cache.get_many(quad.points)
    X = sol.spatial_matrix()
    num = {v: np.zeros(len(modes)) for v in ERROR_VARIABLES}
    den = {v: 0.0 for v in ERROR_VARIABLES}
    mode_idx = np.array(modes, dtype=np.int64) - 1
    for v in ERROR_VARIABLES:
        VX = norm.values(X, v) if sol.n_modes else None
        for q, (mu, w) in enumerate(zip(quad.points, quad.weights)):
            r = norm.values(refs[q], v)
            den[v] += w * (r @ r)
            if VX is None:
                num[v] += w * (r @ r)
                continue
            cum = np.cumsum(VX * sol.parametric_values(mu)[None, :], axis=1)
            for i, mi in enumerate(mode_idx):
                d = (cum[:, mi] if mi >= 0 else 0.0) - r
                num[v][i] += w * (d @ d)
    return {v: np.sqrt(num[v] / den[v]) if den[v] > 0 else np.full(len(modes), np.nan) for v in ERROR_VARIABLES}


# ---------------------------------------------------------------------------
# drag response surfaces


@dataclass
class ResponseSurface:
    """F(mu) = sum_j coeffs[j] prod_l psi_l^j(mu_l) for one force component on one surface."""

    coeffs: np.ndarray
    sol: SeparatedSolution
    name: str = "drag"

    def __call__(self, mu, m: int | None = None) -> float:
        m = self.sol.n_modes if m is None else m
        if m == 0:
            return 0.0
        return float(self.coeffs[:m] @ self.sol.parametric_values(mu)[:m])

    def evaluate(self, points, m: int | None = None) -> np.ndarray:
        return np.array([self(p, m) for p in np.atleast_2d(points)])

    def history(self, mu) -> np.ndarray:
        """Values for every truncation 1..n_modes at one point."""
        return np.cumsum(self.coeffs * self.sol.parametric_values(mu))


def drag_response_surface(sol: SeparatedSolution, functional: np.ndarray, component: int = 0,
                          name: str = "drag") -> ResponseSurface:
    """Drag coefficients of every mode; `functional` is the (2, size) matrix from drag_functional."""
    functional = np.asarray(functional)
    if functional.size == 0:
        raise ValueError("empty drag functional")
    coeffs = functional[component] @ sol.spatial_matrix() if sol.n_modes else np.zeros(0)
    return ResponseSurface(np.asarray(coeffs, dtype=float), sol, name)


@dataclass
class DragErrors:
    E_D: float
    eps: np.ndarray  # pointwise relative error, nan where excluded
    excluded: np.ndarray  # indices with zero reference drag
    smoothed: np.ndarray  # per parametric cell mean of eps


def drag_errors(values: np.ndarray, ref: np.ndarray, quad: ParametricQuadrature) -> DragErrors:
    """Integral and pointwise relative drag errors for surface values at the quadrature points."""
    values, ref = np.asarray(values, float), np.asarray(ref, float)
    den = quad.weights @ ref ** 2
    E = float(np.sqrt((quad.weights @ (values - ref) ** 2) / den)) if den > 0 else float("nan")
    zero = ref == 0
    eps = np.full(len(ref), np.nan)
    eps[~zero] = np.abs(values[~zero] - ref[~zero]) / np.abs(ref[~zero])
    cells = quad.cell_index()
    n_cells = int(np.prod(quad.shape)) if quad.shape else 1
    smoothed = np.full(n_cells, np.nan)
    for c in range(n_cells):
        sel = (cells == c) & ~zero
        if np.any(sel):
            smoothed[c] = eps[sel].mean()
    return DragErrors(E, eps, np.flatnonzero(zero), smoothed)


# ---------------------------------------------------------------------------
# error reports


@dataclass
class ErrorReport:
    method: str
    setting: str  # "n_i=2" or "n_s=41"
    modes: np.ndarray
    E: dict[str, np.ndarray]
    E_D: np.ndarray
    solves: np.ndarray  # full-order solves needed for each truncation
    eps_D: np.ndarray = field(default_factory=lambda: np.zeros(0))
    smoothed_D: np.ndarray = field(default_factory=lambda: np.zeros(0))
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_solves(self) -> int:
        return int(self.solves[-1]) if len(self.solves) else 0

    def solves_to_reach(self, target: float):
        hit = np.flatnonzero(self.E_D <= target)
        return int(self.solves[hit[0]]) if len(hit) else None


def solves_per_truncation(sol: SeparatedSolution) -> np.ndarray:
    """Cumulative solve counts: per mode for a priori runs, the full snapshot count otherwise."""
    cum = sol.info.get("cumulative_solves")
    if cum is not None and len(cum) >= sol.n_modes:
        return np.asarray(cum[: sol.n_modes], dtype=np.int64)
    return np.full(sol.n_modes, sol.n_solves, dtype=np.int64)


def error_report(sol: SeparatedSolution, reference, quad: ParametricQuadrature, norm: FieldNorm,
                 drag: np.ndarray, method: str | None = None, setting: str = "",
                 component: int = 0) -> ErrorReport:
    """All error measures of `sol` for every truncation; drag is a (2, size) drag functional."""
    cache = reference if isinstance(reference, ReferenceCache) else ReferenceCache(reference)
    E = multidim_l2_error(sol, cache, quad, norm)
    refs = cache.get_many(quad.points)
    ref_drag = np.array([drag[component] @ r for r in refs])
    surf = drag_response_surface(sol, drag, component)
    hist = np.array([surf.history(mu) for mu in quad.points])  # (nq, M)
    E_D = np.array([drag_errors(hist[:, m], ref_drag, quad).E_D for m in range(sol.n_modes)])
    final = drag_errors(hist[:, -1] if sol.n_modes else np.zeros(len(ref_drag)), ref_drag, quad)
    return ErrorReport(method or sol.provenance, setting, np.arange(1, sol.n_modes + 1), E, E_D,
                       solves_per_truncation(sol), final.eps, final.smoothed, quad.points)


# ---------------------------------------------------------------------------
# comparison


COMPARISON_HEADER = ("method", "setting", "modes", "solves", "E_u", "E_p", "E_L", "E_D")
MATCHED_HEADER = ("method", "setting", "target_E_D", "solves")


def comparison_report(reports, targets=DRAG_TARGETS):
    """Rows of the comparison table and of the matched-accuracy summary."""
    rows, matched = [], []
    for r in reports:
        if not len(r.modes):
            rows.append((r.method, r.setting, 0, 0, np.nan, np.nan, np.nan, np.nan))
            continue
        rows.append((r.method, r.setting, int(r.modes[-1]), r.n_solves, float(r.E["u"][-1]),
                     float(r.E["p"][-1]), float(r.E["L"][-1]), float(r.E_D[-1])))
        for t in targets:
            matched.append((r.method, r.setting, t, r.solves_to_reach(t)))
    return rows, matched


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10e}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_errors_vs_modes(path, reports) -> None:
    rows = []
    for r in reports:
        for i, m in enumerate(r.modes):
            rows.append((r.method, r.setting, int(m), int(r.solves[i]), r.E["u"][i], r.E["p"][i], r.E["L"][i],
                         r.E_D[i]))
    write_csv(path, ("method", "setting", "m", "solves", "E_u", "E_p", "E_L", "E_D"), rows)


def write_error_map(path, report: ErrorReport, quad: ParametricQuadrature, grids) -> None:
    """One row per parametric cell: index, centre coordinates, smoothed pointwise drag error."""
    rows = []
    cells = list(itertools.product(*(range(g.n_elements) for g in grids)))
    for c, idx in enumerate(cells):
        centre = [0.5 * (g.edges[i] + g.edges[i + 1]) for g, i in zip(grids, idx)]
        rows.append((c, *centre, report.smoothed_D[c]))
    write_csv(path, ("cell", *[f"mu{j + 1}" for j in range(len(grids))], "eps_D"), rows)


def write_drag_surface(path, surfaces: dict[str, ResponseSurface], grids, points_per_element: int = 4) -> None:
    """Response surfaces sampled on a uniform tensor grid of the parametric box."""
    axes = [np.linspace(g.interval[0], g.interval[1], g.n_elements * points_per_element + 1) for g in grids]
    rows = []
    for mu in itertools.product(*axes):
        rows.append((*mu, *[s(mu) for s in surfaces.values()]))
    write_csv(path, (*[f"mu{j + 1}" for j in range(len(grids))], *surfaces), rows)


def write_summary(path, items: dict) -> None:
    """Structured key: value text."""
    lines = [f"{k}: {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


__all__ = [
    "ParametricQuadrature", "parametric_quadrature", "ReferenceCache", "FieldNorm", "multidim_l2_error",
    "ResponseSurface", "drag_response_surface", "DragErrors", "drag_errors", "ErrorReport", "error_report",
    "comparison_report", "write_csv", "write_errors_vs_modes", "write_error_map", "write_drag_surface",
    "write_summary", "DRAG_TARGETS",
]
