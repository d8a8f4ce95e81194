"""Separated solutions: modes with per-variable amplitudes and one parametric factor per parameter."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hdg import FullOrderSolution, Layout
from .mesh import ParametricGrid

FORMAT_TAG = "pgdflow-separated-solution 1"


class ZeroModeError(ValueError):
    pass


@dataclass(frozen=True)
class FlatLayout:
    """Single-block layout for generic tensors."""

    size: int

    def slices(self) -> dict[str, slice]:
        return {"x": slice(0, self.size)}


def block_names(layout) -> list[str]:
    return list(layout.slices())


def stopping_block(layout) -> str:
    return "uhat" if "uhat" in layout.slices() else "x"


@dataclass
class Mode:
    """sigma[v] * blocks[v] is the spatial field of variable v; psi[j] is the factor of parameter j.

    Stored blocks and factors have unit Euclidean norm; a variable whose field vanishes keeps a
    zero block with zero amplitude.
    """

    sigma: dict[str, float]
    blocks: dict[str, np.ndarray]
    psi: tuple[np.ndarray, ...]

    def vector(self, layout) -> np.ndarray:
        out = np.zeros(layout.size)
        for v, s in layout.slices().items():
            out[s] = self.sigma[v] * self.blocks[v]
        return out


def normalize_mode(layout, x, psi) -> Mode:
    """Split a raw spatial vector and raw parametric factors into unit blocks and amplitudes."""
    x = np.asarray(x, dtype=float)
    psi = [np.asarray(p, dtype=float) for p in psi]
    pn = [np.linalg.norm(p) for p in psi]
    if any(n == 0 for n in pn) or not np.any(x):
        raise ZeroModeError("mode has a zero factor")
    scale = float(np.prod(pn)) if pn else 1.0
    sigma, blocks = {}, {}
    for v, s in layout.slices().items():
        b = x[s]
        nb = np.linalg.norm(b)
        sigma[v] = nb * scale
        blocks[v] = b / nb if nb > 0 else np.zeros_like(b)
    return Mode(sigma, blocks, tuple(p / n for p, n in zip(psi, pn)))


@dataclass
class SeparatedSolution:
    layout: object
    grids: tuple[ParametricGrid, ...]
    modes: list[Mode] = field(default_factory=list)
    amplitudes: list[float] = field(default_factory=list)
    provenance: str = "apriori"
    n_solves: int = 0
    info: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def n_params(self) -> int:
        return len(self.grids)

    def append(self, mode: Mode, amplitude: float | None = None) -> None:
        self.modes.append(mode)
        blk = stopping_block(self.layout)
        self.amplitudes.append(float(mode.sigma[blk] if amplitude is None else amplitude))

    def spatial_matrix(self, m: int | None = None) -> np.ndarray:
        """Amplitude-scaled spatial factors as columns, shape (size, m)."""
        modes = self.modes[: m if m is not None else len(self.modes)]
        if not modes:
            return np.zeros((self.layout.size, 0))
        return np.column_stack([md.vector(self.layout) for md in modes])

    def factor_matrix(self, j: int) -> np.ndarray:
        if not self.modes:
            return np.zeros((self.grids[j].n_nodes, 0))
        return np.column_stack([md.psi[j] for md in self.modes])

    def check_mu(self, mu) -> np.ndarray:
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameter values")
        for g, v in zip(self.grids, mu):
            g.check(v)
        return mu

    def parametric_values(self, mu) -> np.ndarray:
        """prod_j psi_j^m(mu_j) for every mode."""
        mu = self.check_mu(mu)
        vals = np.ones(self.n_modes)
        for j, g in enumerate(self.grids):
            vals = vals * (g.basis_at(mu[j]) @ self.factor_matrix(j))[0]
        return vals

    def evaluate_vector(self, mu, m: int | None = None) -> np.ndarray:
        vals = self.parametric_values(mu)
        m = self.n_modes if m is None else m
        return self.spatial_matrix(m) @ vals[:m]

    def evaluate_at(self, mu, m: int | None = None) -> FullOrderSolution:
        x = self.evaluate_vector(mu, m)
        if not isinstance(self.layout, Layout):
            raise TypeError("field evaluation needs an HDG layout")
        return FullOrderSolution.from_vector(self.layout, x, tuple(np.atleast_1d(mu).tolist()))

    def truncated(self, m: int) -> "SeparatedSolution":
        return SeparatedSolution(self.layout, self.grids, self.modes[:m], self.amplitudes[:m], self.provenance,
                                 self.n_solves, dict(self.info))

    def union(self, other: "SeparatedSolution") -> "SeparatedSolution":
        return SeparatedSolution(self.layout, self.grids, self.modes + other.modes, self.amplitudes + other.amplitudes,
                                 self.provenance, self.n_solves + other.n_solves, {})

    def nodal_tensor_factors(self):
        """Amplitude-scaled spatial matrix and per-parameter nodal factor matrices."""
        return self.spatial_matrix(), [self.factor_matrix(j) for j in range(self.n_params)]

    # -- serialisation ------------------------------------------------------
    def save(self, path) -> None:
        fmt = lambda a: " ".join(f"{v:.17g}" for v in np.ravel(a))  # noqa: E731
        lay = self.layout
        lines = [FORMAT_TAG, f"provenance {self.provenance}"]
        if isinstance(lay, Layout):
            lines.append(f"layout hdg {lay.n_trace} {lay.n_elements} {lay.n_local}")
        else:
            lines.append(f"layout flat {lay.size}")
        lines.append(f"params {self.n_params}")
        for g in self.grids:
            lines.append(f"grid {g.interval[0]:.17g} {g.interval[1]:.17g} {g.n_elements} {g.degree} {g.n_quad}")
        lines.append(f"solves {self.n_solves}")
        lines.append(f"modes {self.n_modes}")
        lines.append("amplitudes " + fmt(self.amplitudes))
        names = block_names(lay)
        for i, md in enumerate(self.modes):
            lines.append(f"mode {i}")
            lines.append("sigma " + fmt([md.sigma[v] for v in names]))
            for v in names:
                lines.append(f"{v} " + fmt(md.blocks[v]))
            for j, p in enumerate(md.psi):
                lines.append(f"psi{j} " + fmt(p))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SeparatedSolution":
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
        if " ".join(rows[0]) != FORMAT_TAG:
            raise ValueError(f"{path}: not a separated-solution file")
        it = iter(rows[1:])

        def expect(key):
            r = next(it)
            if r[0] != key:
                raise ValueError(f"{path}: expected '{key}', found '{r[0]}'")
            return r[1:]

        prov = expect("provenance")[0]
        lay = expect("layout")
        layout = Layout(*map(int, lay[1:4])) if lay[0] == "hdg" else FlatLayout(int(lay[1]))
        npa = int(expect("params")[0])
        grids = []
        for _ in range(npa):
            a, b, ne, deg, nq = expect("grid")
            grids.append(ParametricGrid((float(a), float(b)), int(ne), int(deg), int(nq)))
        solves = int(expect("solves")[0])
        nm = int(expect("modes")[0])
        amps = [float(v) for v in expect("amplitudes")]
        names = block_names(layout)
        modes = []
        for _ in range(nm):
            expect("mode")
            sig = dict(zip(names, map(float, expect("sigma"))))
            blocks = {v: np.array(expect(v), dtype=float) for v in names}
            psi = tuple(np.array(expect(f"psi{j}"), dtype=float) for j in range(npa))
            modes.append(Mode(sig, blocks, psi))
        return cls(layout, tuple(grids), modes, amps, prov, solves, {})


def evaluate_at(sol: SeparatedSolution, mu) -> FullOrderSolution:
    return sol.evaluate_at(mu)


def _cp_als(T: np.ndarray, factors: list[np.ndarray], tol_abs: float, n_iter: int) -> float:
    """Joint alternating least squares for a rank-r CP model of T; factors are updated in place.

    Returns the final residual Frobenius norm.
    """
    d = T.ndim
    ax = "abcdefghij"[:d]
    res = np.inf
    for _ in range(n_iter):
        for n in range(d):
            others = [m for m in range(d) if m != n]
            V = np.ones((factors[0].shape[1],) * 2)
            for m in others:
                V *= factors[m].T @ factors[m]
            spec = ax + "," + ",".join(f"{ax[m]}z" for m in others) + f"->{ax[n]}z"
            M = np.einsum(spec, T, *(factors[m] for m in others), optimize=True)
            factors[n] = np.linalg.lstsq(V, M.T, rcond=None)[0].T
        res = float(np.linalg.norm(T - _cp_full(factors)))
        if res <= tol_abs:
            break
    return res


def _cp_full(factors: list[np.ndarray]) -> np.ndarray:
    out = 0.0
    for m in range(factors[0].shape[1]):
        t = factors[0][:, m]
        for U in factors[1:]:
            t = np.multiply.outer(t, U[:, m])
        out = out + t
    return out


def compress(sol: SeparatedSolution, tol: float = 1e-10, als_tol: float = 1e-14, als_max_iter: int = 2000,
             cp_max_iter: int = 500) -> SeparatedSolution:
    """Re-separate the nodal tensor of `sol` with fewer modes when possible.

    The tensor sum_m F[:, m] (x) Psi_1[:, m] (x) ... is first projected on orthonormal bases of the
    column spaces of its factor matrices; separating that small core is equivalent (the Frobenius
    norm is invariant under the projections) and avoids forming the full tensor.  The greedy
    rank-one algorithm runs until the relative Frobenius residual is <= tol.  With two or more
    parameters greedy deflation is not optimal, so smaller ranks are also tried with a joint
    alternating least-squares refinement started from the greedy modes.  Never returns more modes
    than it was given.
    """
    from .aposteriori import greedy_rank_one

    if not sol.modes:
        raise ValueError("cannot compress an empty solution")
    F, Psis = sol.nodal_tensor_factors()
    M = F.shape[1]
    QF, RF = np.linalg.qr(F)
    Qs, Rs = zip(*(np.linalg.qr(P) for P in Psis)) if Psis else ((), ())
    core = np.zeros((RF.shape[0],) + tuple(R.shape[0] for R in Rs))
    for m in range(M):
        t = RF[:, m]
        for R in Rs:
            t = np.multiply.outer(t, R[:, m])
        core += t
    norm = np.linalg.norm(core)
    target = tol * norm
    greedy = greedy_rank_one(core, max_modes=M, residual_tol=target, als_tol=als_tol, als_max_iter=als_max_iter)
    factors, residuals = None, None
    if greedy.residual_norms and greedy.residual_norms[-1] <= target:
        r = len(greedy.sigmas)
        factors = [np.column_stack([s * f for s, f in zip(greedy.sigmas, greedy.spatial)])]
        factors += [np.column_stack([p[j] for p in greedy.factors]) for j in range(len(Rs))]
        residuals = [x / norm for x in greedy.residual_norms]
    else:
        r = M + 1
    if core.ndim >= 3:
        full = greedy_rank_one(core, max_modes=min(r, M), als_tol=als_tol, als_max_iter=als_max_iter)
        for rank in range(1, min(r, len(full.sigmas) + 1)):
            trial = [np.column_stack([s * f for s, f in zip(full.sigmas[:rank], full.spatial[:rank])])]
            trial += [np.column_stack([p[j] for p in full.factors[:rank]]) for j in range(len(Rs))]
            res = _cp_als(core, trial, target, cp_max_iter)
            if res <= target:
                factors, residuals = trial, [res / norm]
                break
    if factors is None:
        return SeparatedSolution(sol.layout, sol.grids, list(sol.modes), list(sol.amplitudes), "compressed",
                                 sol.n_solves, {"compression": "kept input modes"})
    out = SeparatedSolution(sol.layout, sol.grids, [], [], "compressed", sol.n_solves,
                            {"residual_norms": residuals})
    order = np.argsort([-np.prod([np.linalg.norm(U[:, m]) for U in factors]) for m in range(factors[0].shape[1])])
    for m in order:
        out.append(normalize_mode(sol.layout, QF @ factors[0][:, m], [Q @ U[:, m] for Q, U in zip(Qs, factors[1:])]))
    return out
