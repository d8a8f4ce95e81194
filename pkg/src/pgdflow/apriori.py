"""Greedy a priori PGD with alternating spatial and parametric updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .hdg import HDGSystem, SolverError
from .separated import SeparatedSolution, ZeroModeError, normalize_mode

log = logging.getLogger(__name__)

COMPAT_TESTS = ("ones", "rho")


@dataclass(frozen=True)
class AprioriConfig:
    """eta_star: greedy tolerance on the trace amplitude ratio; n_i: alternating iterations per mode.

    compat_test selects the spatial test applied to the per-element compatibility and mean-pressure
    equations in the parametric problem: a unit weight ("ones") or the mode's own mean pressures
    ("rho").  correction_tol enables an early exit of the alternating loop once the relative change
    of the spatial factor falls below it; None keeps exactly n_i iterations.
    """

    eta_star: float = 1e-4
    n_i: int = 2
    max_modes: int = 30
    initial: str = "constant"
    compat_test: str = "ones"
    correction_tol: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.eta_star > 0:
            raise ValueError("eta_star must be positive")
        if self.n_i < 1 or self.max_modes < 1:
            raise ValueError("n_i and max_modes must be >= 1")
        if self.initial not in ("constant", "random"):
            raise ValueError(f"unknown initial guess policy {self.initial!r}")
        if self.compat_test not in COMPAT_TESTS:
            raise ValueError(f"compat_test must be one of {COMPAT_TESTS}")


class ParametricSystem:
    """One-dimensional weighted mass matrices and load vectors of every separated term.

    For operator term t and parameter j, mass[t][j] integrates N_a g_tj N_b over grid j, where g_tj
    is the j-th one-dimensional factor of the term's parameter function; load[s][j] is the analogous
    vector for data term s.  Every parametric integral needed by the alternating scheme is a product
    over parameters of contractions of these matrices.
    """

    def __init__(self, system: HDGSystem, grids):
        self.grids = tuple(grids)
        if len(self.grids) != system.n_params:
            raise ValueError(f"expected {system.n_params} parametric grids, got {len(self.grids)}")
        for g, iv in zip(self.grids, system.mapping.intervals):
            if iv is not None and (g.interval[0] < iv[0] - 1e-12 or g.interval[1] > iv[1] + 1e-12):
                raise ValueError(f"parametric grid {g.interval} exceeds the mapping interval {iv}")
        self.op_scale = np.array([t.factor.scale for t in system.terms])
        self.data_scale = np.array([d.factor.scale for d in system.data])
        self.mass = [[g.mass(t.factor.factor_values(j, g.quad_points)) for j, g in enumerate(self.grids)]
                     for t in system.terms]
        self.load = [[g.load(d.factor.factor_values(j, g.quad_points)) for j, g in enumerate(self.grids)]
                     for d in system.data]

    @property
    def n_params(self) -> int:
        return len(self.grids)

    def _prod(self, pieces, skip=None) -> np.ndarray:
        out = np.ones(len(pieces))
        for t, per_j in enumerate(pieces):
            for j, v in enumerate(per_j):
                if j != skip:
                    out[t] *= v
        return out

    def operator_weights(self, psi, psi_other=None, skip=None) -> np.ndarray:
        """Integrals of g_t(mu) psi(mu) psi_other(mu) over the box, optionally without parameter skip."""
        psi_other = psi if psi_other is None else psi_other
        pieces = [[psi[j] @ M[j] @ psi_other[j] for j in range(self.n_params)] for M in self.mass]
        return self.op_scale * self._prod(pieces, skip)

    def data_weights(self, psi, skip=None) -> np.ndarray:
        pieces = [[lv[j] @ psi[j] for j in range(self.n_params)] for lv in self.load]
        return self.data_scale * self._prod(pieces, skip)

    def matrix(self, j: int, gamma, psi) -> np.ndarray:
        """Left-hand side of the one-dimensional problem for parameter j."""
        w = gamma * self.operator_weights(psi, skip=j)
        return sum(wt * M[j] for wt, M in zip(w, self.mass))

    def rhs(self, j: int, delta, psi, coupling=None, prev_psis=()) -> np.ndarray:
        """Right-hand side: data projections minus the previous modes' contributions.

        delta[s] is the spatial projection of data vector s and coupling[t, i] that of operator term
        t applied to previous mode i.
        """
        w = delta * self.data_weights(psi, skip=j)
        out = sum(wt * lv[j] for wt, lv in zip(w, self.load)) if len(w) else np.zeros(self.grids[j].n_nodes)
        for i, pi in enumerate(prev_psis):
            c = coupling[:, i] * self.operator_weights(psi, pi, skip=j)
            for ct, M in zip(c, self.mass):
                if ct != 0.0:
                    out = out - ct * (M[j] @ pi[j])
        return out


def spatial_test_vector(system: HDGSystem, x: np.ndarray, compat_test: str = "ones") -> np.ndarray:
    """Spatial test function in equation layout built from a trial vector."""
    lay = system.layout
    s, rs = lay.slices(), lay.row_slices()
    y = np.zeros(lay.n_rows)
    y[: lay.size] = x
    if compat_test == "ones":
        y[rs["compat"]] = 1.0
        y[rs["mean"]] = 1.0
    else:
        y[rs["compat"]] = x[s["rho"]]
        y[rs["mean"]] = x[s["rho"]]
    return y


class AprioriSolver:
    """Stateful enrichment driver; exposes the spatial and parametric steps for inspection."""

    def __init__(self, system: HDGSystem, grids, cfg: AprioriConfig):
        self.system = system
        self.cfg = cfg
        self.param = ParametricSystem(system, grids)
        self.grids = self.param.grids
        self.data_vectors = np.column_stack([d.vector for d in system.data]) if system.data else \
            np.zeros((system.layout.n_rows, 0))
        self.sol = SeparatedSolution(system.layout, self.grids, [], [], "apriori", 0, {})
        self._X: list[np.ndarray] = []  # amplitude-scaled spatial vectors of accepted modes
        self._rng = np.random.default_rng(cfg.seed)

    # -- pieces -----------------------------------------------------------------
    def _prev(self):
        return [md.psi for md in self.sol.modes]

    def spatial_operator_weights(self, psi) -> np.ndarray:
        return self.param.operator_weights(psi)

    def spatial_rhs(self, psi) -> np.ndarray:
        rhs = self.data_vectors @ self.param.data_weights(psi) if self.system.data else \
            np.zeros(self.system.layout.n_rows)
        if self._X:
            Xp = np.column_stack(self._X)
            C = np.column_stack([self.param.operator_weights(psi, pi) for pi in self._prev()])
            for t in range(self.system.n_terms):
                v = Xp @ C[t]
                if np.any(v):
                    rhs = rhs - self.system.matrix(t) @ v
        return rhs

    def spatial_step(self, psi) -> np.ndarray:
        """One HDG-structured solve for the spatial factor paired with psi."""
        return self.system.solve(self.spatial_operator_weights(psi), self.spatial_rhs(psi))

    def spatial_constants(self, x, y):
        """gamma[t] = y.K_t x, delta[s] = y.F_s and coupling[t, i] = y.K_t X_i."""
        T = self.system.n_terms
        gamma = np.array([y @ (self.system.matrix(t) @ x) for t in range(T)])
        delta = y @ self.data_vectors
        coupling = np.zeros((T, len(self._X)))
        if self._X:
            Xp = np.column_stack(self._X)
            for t in range(T):
                coupling[t] = (self.system.matrix(t).T @ y) @ Xp
        return gamma, delta, coupling

    def parametric_system(self, j: int, x, psi):
        """Matrix and right-hand side of the one-dimensional problem for parameter j."""
        y = spatial_test_vector(self.system, x, self.cfg.compat_test)
        gamma, delta, coupling = self.spatial_constants(x, y)
        return self.param.matrix(j, gamma, psi), self.param.rhs(j, delta, psi, coupling, self._prev())

    def parametric_step(self, x, psi):
        """Sequential one-dimensional solves for every parameter with x fixed.

        Returns the spatial vector rescaled by the factor norms and the updated unit factors.
        """
        psi = [p.copy() for p in psi]
        x = x.copy()
        for j in range(self.param.n_params):
            A, b = self.parametric_system(j, x, psi)
            try:
                new = np.linalg.solve(A, b)
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"singular parametric system for parameter {j}") from exc
            nrm = np.linalg.norm(new)
            if nrm == 0 or not np.isfinite(nrm):
                raise ZeroModeError(f"parametric factor {j} vanished")
            psi[j] = new / nrm
            x *= nrm
        return x, psi

    def add_mode(self, mode) -> None:
        """Accept a mode computed elsewhere (used to seed or replay an enrichment)."""
        self.sol.append(mode)
        self._X.append(mode.vector(self.system.layout))

    def initial_psi(self):
        out = []
        for g in self.grids:
            v = np.ones(g.n_nodes) if self.cfg.initial == "constant" else self._rng.standard_normal(g.n_nodes)
            out.append(v / np.linalg.norm(v))
        return out

    # -- enrichment ---------------------------------------------------------------
    def enrich(self) -> float:
        """Compute and append one mode; returns its trace amplitude."""
        m = self.sol.n_modes + 1
        psi = self.initial_psi()
        x = self.spatial_step(psi)
        for q in range(1, self.cfg.n_i + 1):
            psi_old = psi
            x_scaled, psi = self.parametric_step(x, psi)
            x = self.spatial_step(psi)
            dx = np.linalg.norm(x - x_scaled) / max(np.linalg.norm(x), 1e-300)
            dpsi = max(np.linalg.norm(a - b) for a, b in zip(psi, psi_old)) if psi else 0.0
            sig = np.linalg.norm(x[self.system.layout.slices()["uhat"]])
            log.info("m=%d q=%d sigma_uhat=%.6e dx=%.3e dpsi=%.3e", m, q, sig, dx, dpsi)
            if self.cfg.correction_tol is not None and dx <= self.cfg.correction_tol:
                break
        self.add_mode(normalize_mode(self.system.layout, x, psi))
        return self.sol.amplitudes[-1]

    def run(self) -> SeparatedSolution:
        start = self.system.n_solves
        reason = "max_modes"
        cumulative = self.sol.info.setdefault("cumulative_solves", [])
        while self.sol.n_modes < self.cfg.max_modes:
            try:
                amp = self.enrich()
            except ZeroModeError as exc:
                reason = f"zero mode ({exc})"
                break
            cumulative.append(self.system.n_solves - start)
            ratio = amp / self.sol.amplitudes[0] if self.sol.amplitudes[0] > 0 else 0.0
            log.info("m=%d amplitude=%.6e ratio=%.6e solves=%d", self.sol.n_modes, amp, ratio,
                     self.system.n_solves - start)
            if ratio <= self.cfg.eta_star:
                reason = "tolerance"
                break
        self.sol.n_solves = self.system.n_solves - start
        self.sol.info.update(stop_reason=reason, n_i=self.cfg.n_i)
        return self.sol


def run_apriori(system: HDGSystem, grids, cfg: AprioriConfig | None = None) -> SeparatedSolution:
    return AprioriSolver(system, grids, cfg or AprioriConfig()).run()
