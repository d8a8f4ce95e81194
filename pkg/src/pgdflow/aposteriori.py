"""Snapshot tensors and their greedy rank-one least-squares separation."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hdg import HDGSystem
from .mesh import ParametricGrid
from .separated import SeparatedSolution, ZeroModeError, normalize_mode, stopping_block

log = logging.getLogger(__name__)

LEVEL_DEGREE = {"vertices": 1, "half": 2}


@dataclass(frozen=True)
class AposterioriConfig:
    eta_star: float = 1e-8
    eta_sigma: float = 1e-10
    n_iter: int = 500
    max_modes: int = 60

    def __post_init__(self):
        if not (self.eta_star > 0 and self.eta_sigma > 0):
            raise ValueError("tolerances must be positive")
        if self.n_iter < 1 or self.max_modes < 1:
            raise ValueError("n_iter and max_modes must be >= 1")


@dataclass(frozen=True)
class SnapshotPlan:
    """Per-parameter node subsets of the parametric grids.

    Level 'vertices' keeps element endpoints, 'half' the nodes of the degree-2 space (nested only
    for even grid degree) and 'all' every node.  `sub_grids` are the grids whose nodes are the
    selected points; separated factors of the snapshots live on them.
    """

    grids: tuple[ParametricGrid, ...]
    levels: tuple[str, ...]
    indices: tuple[np.ndarray, ...] = field(init=False)
    sub_grids: tuple[ParametricGrid, ...] = field(init=False)

    def __post_init__(self):
        if len(self.levels) != len(self.grids):
            raise ValueError("one level per parameter is required")
        idx, subs = [], []
        for g, lev in zip(self.grids, self.levels):
            if lev == "all":
                deg = g.degree
            elif lev in LEVEL_DEGREE:
                deg = LEVEL_DEGREE[lev]
                if deg > g.degree:
                    raise ValueError(f"level {lev!r} needs grid degree >= {deg}")
            else:
                raise ValueError(f"unknown snapshot level {lev!r}")
            idx.append(g.coarse_indices(deg))
            subs.append(ParametricGrid(g.interval, g.n_elements, deg, g.n_quad))
        object.__setattr__(self, "indices", tuple(idx))
        object.__setattr__(self, "sub_grids", tuple(subs))

    @classmethod
    def uniform(cls, grids, level: str) -> "SnapshotPlan":
        return cls(tuple(grids), (level,) * len(grids))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(i) for i in self.indices)

    @property
    def n_s(self) -> int:
        return int(np.prod(self.shape))

    def points(self):
        """(multi-index, mu) pairs in row-major order."""
        coords = self.coords()
        for mi in itertools.product(*(range(n) for n in self.shape)):
            yield mi, tuple(float(coords[j][i]) for j, i in enumerate(mi))

    def coords(self) -> list[np.ndarray]:
        return [g.nodes[i] for g, i in zip(self.grids, self.indices)]


@dataclass
class SnapshotTensor:
    data: np.ndarray  # (size, n_1, ..., n_d)
    coords: list[np.ndarray]

    @property
    def n_params(self) -> int:
        return self.data.ndim - 1

    def save(self, path) -> None:
        """Text header (axis sizes, coordinates) terminated by '---', then raw float64 row-major data."""
        with Path(path).open("wb") as fh:
            head = ["pgdflow-snapshot-tensor 1", "shape " + " ".join(map(str, self.data.shape))]
            for c in self.coords:
                head.append("coords " + " ".join(f"{v:.17g}" for v in c))
            head.append("---")
            fh.write(("\n".join(head) + "\n").encode())
            fh.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SnapshotTensor":
        raw = Path(path).read_bytes()
        cut = raw.index(b"\n---\n") + 5
        head = raw[:cut].decode().splitlines()
        if head[0] != "pgdflow-snapshot-tensor 1":
            raise ValueError(f"{path}: not a snapshot tensor file")
        shape = tuple(int(v) for v in head[1].split()[1:])
        coords = [np.array(ln.split()[1:], dtype=float) for ln in head[2:-1]]
        data = np.frombuffer(raw[cut:], dtype="<f8").reshape(shape).copy()
        return cls(data, coords)


def compute_snapshots(plan: SnapshotPlan, system: HDGSystem, threads: int = 1) -> SnapshotTensor:
    points = list(plan.points())
    data = np.empty((system.layout.size,) + plan.shape)

    def one(item):
        mi, mu = item
        try:
            return mi, system.solve_at(mu).vector()
        except Exception as exc:
            raise RuntimeError(f"snapshot at mu={mu} failed: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, points))
    else:
        results = [one(p) for p in points]
    for mi, x in results:
        data[(slice(None),) + mi] = x
    return SnapshotTensor(data, plan.coords())


# ---------------------------------------------------------------------------
# rank-one alternating least squares


def _contract(R: np.ndarray, vecs, skip: int) -> np.ndarray:
    """Contract every axis of R except `skip` with the matching vector."""
    out = R
    for ax in range(R.ndim - 1, -1, -1):
        if ax != skip:
            out = np.tensordot(out, vecs[ax], axes=([ax], [0]))
    return out


def als_rank_one(R: np.ndarray, eta_sigma: float = 1e-10, n_iter: int = 500):
    """Best rank-one approximation sigma f (x) psi_1 (x) ... by alternating directions.

    Returns (f, [psi_j], sigma, iterations); factors have unit norm.
    """
    if not np.any(R):
        raise ZeroModeError("zero residual")
    d = R.ndim
    vecs = [None] + [np.ones(n) / np.sqrt(n) for n in R.shape[1:]]
    if not np.any(_contract(R, vecs, 0)):
        idx = np.unravel_index(np.argmax(np.abs(R)), R.shape)
        vecs = [None] + [np.eye(n)[i] for n, i in zip(R.shape[1:], idx[1:])]
    sigma_old = None
    sigma = 0.0
    q = 0
    for q in range(1, n_iter + 1):
        for ax in range(d):
            v = _contract(R, vecs, ax)
            nv = np.linalg.norm(v)
            if nv == 0:
                raise ZeroModeError("contraction vanished")
            vecs[ax] = v / nv
            sigma = nv
        if sigma_old is not None and abs(sigma - sigma_old) <= eta_sigma * sigma:
            break
        sigma_old = sigma
    return vecs[0], vecs[1:], float(sigma), q


@dataclass
class RankOneResult:
    sigmas: list[float] = field(default_factory=list)
    spatial: list[np.ndarray] = field(default_factory=list)
    factors: list[list[np.ndarray]] = field(default_factory=list)
    residual_norms: list[float] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    initial_norm: float = 0.0


def greedy_rank_one(tensor: np.ndarray, max_modes: int, residual_tol: float | None = None, stop=None,
                    als_tol: float = 1e-10, als_max_iter: int = 500) -> RankOneResult:
    """Greedy deflation: extract rank-one terms from the residual until a stopping rule fires.

    stop(result) -> bool is checked after each accepted mode; residual_tol stops once the residual
    Frobenius norm drops to that value.
    """
    R = np.array(tensor, dtype=float, copy=True)
    res = RankOneResult(initial_norm=float(np.linalg.norm(R)))
    for _ in range(max_modes):
        if residual_tol is not None and (res.residual_norms[-1] if res.residual_norms else res.initial_norm) <= residual_tol:
            break
        try:
            f, psis, sigma, q = als_rank_one(R, als_tol, als_max_iter)
        except ZeroModeError:
            break
        term = sigma * f
        for p in psis:
            term = np.multiply.outer(term, p)
        R -= term
        res.sigmas.append(sigma)
        res.spatial.append(f)
        res.factors.append(psis)
        res.residual_norms.append(float(np.linalg.norm(R)))
        res.iterations.append(q)
        if stop is not None and stop(res):
            break
    return res


def run_aposteriori(tensor: SnapshotTensor | np.ndarray, cfg: AposterioriConfig, grids, layout,
                    n_solves: int = 0) -> SeparatedSolution:
    """Separate a snapshot tensor; grids are the (sub-)grids whose nodes index the tensor axes."""
    data = tensor.data if isinstance(tensor, SnapshotTensor) else np.asarray(tensor)
    grids = tuple(grids)
    if data.shape[1:] != tuple(g.n_nodes for g in grids):
        raise ValueError("tensor axes do not match the parametric grids")
    blk = layout.slices()[stopping_block(layout)]

    def amp(res, i):
        return res.sigmas[i] * np.linalg.norm(res.spatial[i][blk])

    def stop(res):
        a1 = amp(res, 0)
        return a1 == 0 or amp(res, len(res.sigmas) - 1) / a1 <= cfg.eta_star

    res = greedy_rank_one(data, cfg.max_modes, stop=stop, als_tol=cfg.eta_sigma, als_max_iter=cfg.n_iter)
    sol = SeparatedSolution(layout, grids, [], [], "aposteriori", n_solves,
                            {"residual_norms": res.residual_norms, "initial_norm": res.initial_norm,
                             "als_iterations": res.iterations})
    for sigma, f, psis in zip(res.sigmas, res.spatial, res.factors):
        sol.append(normalize_mode(layout, sigma * f, psis))
        log.info("mode=%d sigma=%.6e sigma_uhat=%.6e", sol.n_modes, sigma, sol.amplitudes[-1])
    return sol
