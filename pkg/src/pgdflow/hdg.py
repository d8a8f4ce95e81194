"""HDG discretisation of Stokes flow on a reference mesh with a separated geometric mapping.

The discrete operator is affine in the separated Jacobian: for weights w it reads
    K(w) = sum_t w_t K_t,
with one term per determinant term (mass of the mixed variable, weighted by D^t), one per
adjugate term (gradient, divergence and face-flux couplings, weighted by A^k) and a single
term collecting the stabilisation and element-mean couplings.  At a parameter point the weights
are the parametric factors; inside the a priori PGD they are parametric integrals.

Unknowns are stacked as [uhat, rho, u, p, L] (trace velocity, element mean pressure, element
velocity, pressure and mixed variable L = -nu grad u with L[i, j] = -nu d_i u_j).  Equations are
stacked as [trace, compat, u, p, L, mean] rows.  Solves eliminate the element unknowns by static
condensation; each element carries one extra multiplier that is zero at the solution and makes
its local system square.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mapping import SeparatedJacobian, SeparatedMapping, identity_mapping, separate_det_adj
from .mesh import (
    DIRICHLET,
    NEUMANN,
    SLIP,
    NodalBasis,
    ReferenceMesh,
    edge_point,
    edge_tangent,
    fekete_nodes_1d,
    gauss_quadrature_1d,
    lagrange_1d,
    triangle_quadrature,
)
from .paramfunc import ParamFunction


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class DataTerm:
    """One separated data term g(x) * lambda(mu); g maps points (n, 2) to vectors (n, 2)."""

    func: Callable[[np.ndarray], np.ndarray]
    factor: ParamFunction | None = None
    markers: tuple[int, ...] | None = None


@dataclass(frozen=True)
class StokesProblem:
    nu: float = 1.0
    dirichlet: tuple[DataTerm, ...] = ()
    neumann: tuple[DataTerm, ...] = ()
    source: tuple[DataTerm, ...] = ()
    tau_scale: float = 10.0
    length: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("viscosity must be positive")

    @property
    def tau(self) -> float:
        return self.tau_scale * self.nu / self.length


def constant_vector(v) -> Callable[[np.ndarray], np.ndarray]:
    v = np.asarray(v, dtype=float)
    return lambda x: np.broadcast_to(v, (len(x), 2)).copy()


# ---------------------------------------------------------------------------
# layout and solutions


@dataclass(frozen=True)
class Layout:
    n_trace: int
    n_elements: int
    n_local: int  # scalar nodes per element

    @property
    def size(self) -> int:
        return self.n_trace + self.n_elements * (1 + 7 * self.n_local)

    @property
    def n_rows(self) -> int:
        return self.size + self.n_elements

    def slices(self) -> dict[str, slice]:
        t, E, n = self.n_trace, self.n_elements, self.n_local
        o = [0, t, t + E, t + E + 2 * n * E, t + E + 3 * n * E, t + E + 7 * n * E]
        return dict(uhat=slice(o[0], o[1]), rho=slice(o[1], o[2]), u=slice(o[2], o[3]),
                    p=slice(o[3], o[4]), L=slice(o[4], o[5]))

    def row_slices(self) -> dict[str, slice]:
        s = self.slices()
        s["trace"] = s.pop("uhat")
        s["compat"] = s.pop("rho")
        s["mean"] = slice(self.size, self.n_rows)
        return s

    def shapes(self) -> dict[str, tuple]:
        E, n = self.n_elements, self.n_local
        return dict(uhat=(self.n_trace,), rho=(E,), u=(E, 2, n), p=(E, n), L=(E, 2, 2, n))


VARIABLES = ("uhat", "rho", "u", "p", "L")


@dataclass
class FullOrderSolution:
    layout: Layout
    uhat: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    p: np.ndarray
    L: np.ndarray
    mu: tuple | None = None

    def vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, v).ravel() for v in VARIABLES])

    @classmethod
    def from_vector(cls, layout: Layout, x: np.ndarray, mu=None) -> "FullOrderSolution":
        s, sh = layout.slices(), layout.shapes()
        return cls(layout, *(np.asarray(x[s[v]]).reshape(sh[v]) for v in VARIABLES), mu=mu)

    @classmethod
    def zeros(cls, layout: Layout) -> "FullOrderSolution":
        return cls.from_vector(layout, np.zeros(layout.size))


# ---------------------------------------------------------------------------
# geometry


class Geometry:
    """Isoparametric quadrature data on the reference mesh (independent of the mapping)."""

    def __init__(self, mesh: ReferenceMesh, degree: int | None = None):
        k = mesh.k
        self.mesh = mesh
        self.k = k
        self.K = k + 1
        self.basis = NodalBasis(k)
        self.n = self.basis.n
        deg = degree if degree is not None else 2 * k + 2
        q, w = triangle_quadrature(deg)
        X = mesh.element_coords()
        self.N = self.basis.eval(q)
        dN = self.basis.grad(q)
        self.xq = np.einsum("qa,ead->eqd", self.N, X)
        Jiso = np.einsum("qai,eaj->eqij", dN, X)
        det = np.linalg.det(Jiso)
        if np.any(det <= 0):
            bad = int(np.flatnonzero(det.min(axis=1) <= 0)[0])
            raise SolverError(f"inverted element {bad}")
        self.wq = w[None, :] * det
        self.dN = np.einsum("eqij,qaj->eqai", np.linalg.inv(Jiso), dN)
        self.area = self.wq.sum(axis=1)

        nfq = (deg + 1) // 2 + 1
        t, wt = gauss_quadrature_1d(nfq)
        self.nfq = nfq
        self.Mt = lagrange_1d(fekete_nodes_1d(k), t)
        flip = mesh.elem_face_flip
        E = mesh.n_elements
        self.Nf = np.empty((E, 3, nfq, self.n))
        self.xf = np.empty((E, 3, nfq, 2))
        self.nf = np.empty((E, 3, nfq, 2))
        self.wf = np.empty((E, 3, nfq))
        for f in range(3):
            for fl in (False, True):
                sel = np.flatnonzero(flip[:, f] == fl)
                if not len(sel):
                    continue
                s = -t if fl else t
                pts = edge_point(f, s)
                Nl = self.basis.eval(pts)
                dNl = self.basis.grad(pts)
                tan_ref = np.einsum("qai,i->qa", dNl, edge_tangent(f))
                Xs = X[sel]
                self.Nf[sel, f] = Nl[None]
                self.xf[sel, f] = np.einsum("qa,ead->eqd", Nl, Xs)
                tang = np.einsum("qa,ead->eqd", tan_ref, Xs)
                ln = np.linalg.norm(tang, axis=2)
                self.nf[sel, f] = np.stack([tang[..., 1], -tang[..., 0]], axis=-1) / ln[..., None]
                self.wf[sel, f] = wt[None, :] * ln
        tags = mesh.boundary_tags[mesh.elem_faces]
        self.face_tag = tags
        self.face_marker = mesh.face_markers[mesh.elem_faces]
        self.nonD = tags != DIRICHLET
        self.slip = tags == SLIP
        # slip faces are straight: one tangent per face
        self.tangent = np.zeros((E, 3, 2))
        es, fs = np.nonzero(self.slip)
        for e, f in zip(es, fs):
            nrm = self.nf[e, f]
            if np.max(np.abs(nrm - nrm[0])) > 1e-10:
                raise SolverError(f"slip face {mesh.elem_faces[e, f]} is curved; slip faces must be straight")
            tv = np.array([-nrm[0, 1], nrm[0, 0]])
            assert abs(tv @ nrm[0]) < 1e-12 and abs(tv @ tv - 1.0) < 1e-12
            self.tangent[e, f] = tv

        # trace numbering: non-Dirichlet faces carry 2 (k+1) unknowns each
        owned = mesh.boundary_tags != DIRICHLET
        base = -np.ones(mesh.n_faces, dtype=np.int64)
        base[owned] = np.arange(owned.sum()) * 2 * self.K
        self.n_trace = int(owned.sum()) * 2 * self.K
        fb = base[mesh.elem_faces]  # (E, 3)
        j = np.arange(2)[None, None, :, None]
        c = np.arange(self.K)[None, None, None, :]
        idx = fb[:, :, None, None] + j * self.K + c
        self.trace_dofs = np.where(fb[:, :, None, None] >= 0, idx, -1)  # (E, 3, 2, K)
        self.layout = Layout(self.n_trace, E, self.n)

    def face_values(self, fn, mask) -> np.ndarray:
        """fn evaluated at face quadrature points where mask (E, 3) holds, zero elsewhere."""
        out = np.zeros(self.xf.shape)
        if mask.any():
            out[mask] = np.asarray(fn(self.xf[mask].reshape(-1, 2))).reshape(-1, self.nfq, 2)
        return out


# ---------------------------------------------------------------------------
# element blocks


@dataclass
class TermBlocks:
    """Element blocks of one operator term on the elements `elems`."""

    kind: str  # 'det', 'adj' or 'const'
    elems: np.ndarray
    data: dict[str, np.ndarray]


def det_blocks(geo: Geometry, D: np.ndarray, elems) -> TermBlocks:
    DM = np.einsum("eq,qa,qb->eab", geo.wq[elems] * D, geo.N, geo.N)
    return TermBlocks("det", elems, dict(DM=DM))


def adj_blocks(geo: Geometry, A_vol: np.ndarray, A_face: np.ndarray, elems) -> TermBlocks:
    AgN = np.einsum("eqiz,eqaz->eqai", A_vol, geo.dN[elems])
    G = np.einsum("eq,eqai,qb->eiab", geo.wq[elems], AgN, geo.N)
    An = np.einsum("efqiz,efqz->efqi", A_face, geo.nf[elems]) * geo.wf[elems][..., None]
    H = np.einsum("efqi,efqa,qc->eiafc", An, geo.Nf[elems], geo.Mt)
    Q = np.einsum("efqi,qc,qd->eifcd", An, geo.Mt, geo.Mt)
    return TermBlocks("adj", elems, dict(G=G, H=H, Q=Q))


def const_blocks(geo: Geometry, tau: float) -> TermBlocks:
    wf = geo.wf
    S = tau * np.einsum("efq,efqa,efqb->eab", wf, geo.Nf, geo.Nf)
    St = tau * np.einsum("efq,efqa,qc->eafc", wf, geo.Nf, geo.Mt)
    Mf = tau * np.einsum("efq,qc,qd->efcd", wf, geo.Mt, geo.Mt)
    mv = np.einsum("eq,qa->ea", geo.wq, geo.N) / geo.area[:, None]
    return TermBlocks("const", np.arange(geo.mesh.n_elements), dict(S=S, St=St, Mf=Mf, mv=mv))


@dataclass
class LocalOperators:
    """Per-element condensation data.

    K (E, m, m) acts on [L, u, p, lambda] with m = 7n + 1; B (E, m, 6K) and b_rho (E, m) are the
    coefficients of the element's traces and mean pressure on the right-hand side; T (E, 6K, m)
    and D (E, 6K, 6K) give the element's contribution to its face equations; C (E, 6K) the
    coefficients of the element's compatibility equation.  Trace indices run over (face, comp, node).
    """

    K: np.ndarray
    B: np.ndarray
    b_rho: np.ndarray
    T: np.ndarray
    D: np.ndarray
    C: np.ndarray


def local_operators(geo: Geometry, nu: float, elems: np.ndarray, DM=None, G=None, H=None, Q=None,
                    const: dict | None = None, w0: float = 0.0, with_multiplier: bool = True) -> LocalOperators:
    """Assemble local operators on `elems` from (already weighted) blocks; missing blocks are zero."""
    n, K = geo.n, geo.K
    E = len(elems)
    m = 7 * n + 1
    nt = 6 * K
    iL = lambda i, j: slice((2 * i + j) * n, (2 * i + j + 1) * n)  # noqa: E731
    iU = lambda j: slice(4 * n + j * n, 4 * n + (j + 1) * n)  # noqa: E731
    iP = slice(6 * n, 7 * n)
    tr = lambda f, j: slice(f * 2 * K + j * K, f * 2 * K + (j + 1) * K)  # noqa: E731
    Km = np.zeros((E, m, m))
    B = np.zeros((E, m, nt))
    b_rho = np.zeros((E, m))
    T = np.zeros((E, nt, m))
    Dg = np.zeros((E, nt, nt))
    C = np.zeros((E, nt))
    nonD = geo.nonD[elems]
    slip = geo.slip[elems]
    tng = geo.tangent[elems]
    plain = nonD & ~slip

    if DM is not None:
        for i in range(2):
            for j in range(2):
                Km[:, iL(i, j), iL(i, j)] = -DM / nu
    if G is not None:
        Gt = np.swapaxes(G, 2, 3)
        for i in range(2):
            for j in range(2):
                Km[:, iL(i, j), iU(j)] = G[:, i]
                Km[:, iU(j), iL(i, j)] = Gt[:, i]
        for j in range(2):
            Km[:, iU(j), iP] = Gt[:, j]
            Km[:, iP, iU(j)] = G[:, j]
    if H is not None:
        Hm = H * nonD[:, None, None, :, None]
        for f in range(3):
            pf = plain[:, f][:, None, None]
            sf = slip[:, f][:, None, None]
            for j in range(2):
                for i in range(2):
                    B[:, iL(i, j), tr(f, j)] = Hm[:, i, :, f, :]
                    HT = np.swapaxes(Hm[:, i, :, f, :], 1, 2)
                    T[:, tr(f, j), iL(i, j)] += pf * HT
                    # slip faces keep only the tangential component of the flux
                    T[:, tr(f, 1), iL(i, j)] += sf * (-tng[:, f, j][:, None, None] * HT)
                B[:, iP, tr(f, j)] = Hm[:, j, :, f, :]
                T[:, tr(f, j), iP] += pf * np.swapaxes(Hm[:, j, :, f, :], 1, 2)
                C[:, tr(f, j)] = Hm[:, j, :, f, :].sum(axis=1)
    if Q is not None:
        for f in range(3):
            sf = slip[:, f][:, None, None]
            for jj in range(2):
                Dg[:, tr(f, 0), tr(f, jj)] += sf * Q[:, jj, f]
    if const is not None and w0 != 0.0:
        S = w0 * const["S"][elems]
        St = w0 * const["St"][elems] * nonD[:, None, :, None]
        Mf = w0 * const["Mf"][elems]
        for j in range(2):
            Km[:, iU(j), iU(j)] += S
        Km[:, 7 * n, iP] = w0 * const["mv"][elems]
        b_rho[:, 7 * n] = w0
        for f in range(3):
            pf = plain[:, f][:, None, None]
            sf = slip[:, f][:, None, None]
            StT = np.swapaxes(St[:, :, f, :], 1, 2)
            for j in range(2):
                B[:, iU(j), tr(f, j)] = St[:, :, f, :]
                T[:, tr(f, j), iU(j)] += pf * StT
                Dg[:, tr(f, j), tr(f, j)] += pf * (-Mf[:, f])
                tj = tng[:, f, j][:, None, None]
                T[:, tr(f, 1), iU(j)] += sf * (-tj * StT)
                Dg[:, tr(f, 1), tr(f, j)] += sf * (tj * Mf[:, f])
    if with_multiplier:
        Km[:, iP, 7 * n] = const["mv"][elems] if const is not None else 1.0 / n
    return LocalOperators(Km, B, b_rho, T, Dg, C)


# ---------------------------------------------------------------------------
# the separated system


@dataclass
class OperatorTerm:
    kind: str
    index: int  # det/adj term index, -1 for the constant term
    factor: ParamFunction
    blocks: TermBlocks


@dataclass
class DataVector:
    name: str
    vector: np.ndarray
    factor: ParamFunction


class HDGSystem:
    """Separated HDG operator K(mu) = sum_t g_t(mu) K_t and data F(mu) = sum_s h_s(mu) F_s."""

    def __init__(self, mesh: ReferenceMesh, problem: StokesProblem, mapping: SeparatedMapping | None = None,
                 quad_degree: int | None = None, labels: np.ndarray | None = None):
        self.mesh = mesh
        self.problem = problem
        self.mapping = mapping if mapping is not None else identity_mapping()
        self.jac: SeparatedJacobian = separate_det_adj(self.mapping)
        self.geo = geo = Geometry(mesh, quad_degree)
        self.layout = geo.layout
        self.n_params = self.mapping.n_params
        E = mesh.n_elements
        self.labels = self.mapping.classify(mesh.element_centres()) if labels is None else np.asarray(labels)
        self.pure_dirichlet = not np.any(mesh.boundary_tags == NEUMANN)
        self._lock = threading.Lock()
        self.n_solves = 0
        self._matrices: dict[int, sp.csr_matrix] = {}

        nq, nfq = geo.N.shape[0], geo.nfq
        lab_v = np.repeat(self.labels, nq)
        lab_f = np.repeat(self.labels, 3 * nfq)
        Dv = self.jac.det_fields(geo.xq.reshape(-1, 2), lab_v).reshape(-1, E, nq)
        Av = self.jac.adj_fields(geo.xq.reshape(-1, 2), lab_v).reshape(-1, E, nq, 2, 2)
        Af = self.jac.adj_fields(geo.xf.reshape(-1, 2), lab_f).reshape(-1, E, 3, nfq, 2, 2)
        self._Dv, self._Av, self._Af = Dv, Av, Af

        self.terms: list[OperatorTerm] = []
        dscale = max(np.abs(Dv).max(), 1e-300)
        for t, dt in enumerate(self.jac.det_terms):
            elems = self._support(dt.support)
            if not len(elems) or np.abs(Dv[t][elems]).max() <= 1e-12 * dscale:
                continue
            self.terms.append(OperatorTerm("det", t, dt.factor, det_blocks(geo, Dv[t][elems], elems)))
        ascale = max(np.abs(Av).max(), 1e-300)
        for t, at in enumerate(self.jac.adj_terms):
            elems = self._support(at.support)
            if not len(elems) or max(np.abs(Av[t][elems]).max(), np.abs(Af[t][elems]).max()) <= 1e-12 * ascale:
                continue
            self.terms.append(OperatorTerm("adj", t, at.factor,
                                           adj_blocks(geo, Av[t][elems], Af[t][elems], elems)))
        self.const = const_blocks(geo, problem.tau)
        self.terms.append(OperatorTerm("const", -1, ParamFunction.const(self.n_params), self.const))
        self.data: list[DataVector] = self._build_data()

    # -- helpers ---------------------------------------------------------
    def _support(self, support) -> np.ndarray:
        if support is None:
            return np.arange(self.mesh.n_elements)
        return np.flatnonzero(np.isin(self.labels, list(support)))

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def weights_at(self, mu) -> np.ndarray:
        mu = self.mapping.check_mu(mu)
        return np.array([t.factor(mu) for t in self.terms])

    def rhs_at(self, mu) -> np.ndarray:
        mu = self.mapping.check_mu(mu)
        out = np.zeros(self.layout.n_rows)
        for d in self.data:
            out += d.factor(mu) * d.vector
        return out

    def _data_factor(self, term: DataTerm) -> ParamFunction:
        f = term.factor if term.factor is not None else ParamFunction.const(self.n_params)
        if f.n_params != self.n_params:
            raise ValueError("data factor parameter count does not match the mapping")
        return f

    def _face_mask(self, tag, markers):
        mask = self.geo.face_tag == tag
        if markers is not None:
            mask &= np.isin(self.geo.face_marker, list(markers))
        return mask

    def _build_data(self) -> list[DataVector]:
        geo, lay, pb = self.geo, self.layout, self.problem
        rs = lay.row_slices()
        E, n = lay.n_elements, lay.n_local
        out = []
        for l, term in enumerate(pb.dirichlet):
            fac = self._data_factor(term)
            g = geo.face_values(term.func, self._face_mask(DIRICHLET, term.markers))
            wg = g * geo.wf[..., None]
            v = np.zeros(lay.n_rows)
            v[rs["u"]] = (pb.tau * np.einsum("efqj,efqa->eja", wg, geo.Nf)).ravel()
            out.append(DataVector(f"dirichlet{l}:tau", v, fac))
            for t, at in enumerate(self.jac.adj_terms):
                elems = self._support(at.support)
                An = np.einsum("efqiz,efqz->efqi", self._Af[t][elems], geo.nf[elems])
                if not len(elems) or not np.any(wg[elems]) or not np.any(An):
                    continue
                flux = np.einsum("efqi,efqj->efqij", An, wg[elems])
                Lr = np.zeros((E, 2, 2, n))
                Lr[elems] = np.einsum("efqij,efqa->eija", flux, geo.Nf[elems])
                gn = np.einsum("efqi,efqi->efq", An, wg[elems])
                pr = np.zeros((E, n))
                pr[elems] = np.einsum("efq,efqa->ea", gn, geo.Nf[elems])
                cr = np.zeros(E)
                cr[elems] = -gn.sum(axis=(1, 2))
                v = np.zeros(lay.n_rows)
                v[rs["L"]] = Lr.ravel()
                v[rs["p"]] = pr.ravel()
                v[rs["compat"]] = cr
                out.append(DataVector(f"dirichlet{l}:adj{t}", v, at.factor.scaled(1.0) * fac))
        for l, term in enumerate(pb.neumann):
            fac = self._data_factor(term)
            g = geo.face_values(term.func, self._face_mask(NEUMANN, term.markers))
            contrib = -np.einsum("efq,efqj,qc->efjc", geo.wf, g, geo.Mt)
            v = np.zeros(lay.n_rows)
            dofs = geo.trace_dofs
            ok = dofs >= 0
            np.add.at(v, dofs[ok], contrib[ok])
            out.append(DataVector(f"neumann{l}", v, fac))
        for l, term in enumerate(pb.source):
            fac = self._data_factor(term)
            s = np.asarray(term.func(geo.xq.reshape(-1, 2))).reshape(E, -1, 2)
            for t, dt in enumerate(self.jac.det_terms):
                elems = self._support(dt.support)
                if not len(elems):
                    continue
                ws = geo.wq[elems][..., None] * self._Dv[t][elems][..., None] * s[elems]
                if not np.any(ws):
                    continue
                ur = np.zeros((E, 2, n))
                ur[elems] = np.einsum("eqj,qa->eja", ws, geo.N)
                v = np.zeros(lay.n_rows)
                v[rs["u"]] = ur.ravel()
                out.append(DataVector(f"source{l}:det{t}", v, dt.factor * fac))
        return out

    # -- operators ---------------------------------------------------------
    def effective_blocks(self, weights) -> dict[str, np.ndarray]:
        """Weighted sums of the element blocks over all operator terms."""
        geo = self.geo
        E, n, K = self.mesh.n_elements, geo.n, geo.K
        DM = np.zeros((E, n, n))
        G = np.zeros((E, 2, n, n))
        H = np.zeros((E, 2, n, 3, K))
        Q = np.zeros((E, 2, 3, K, K))
        w0 = 0.0
        for w, term in zip(weights, self.terms):
            if w == 0.0:
                continue
            b = term.blocks
            if term.kind == "det":
                DM[b.elems] += w * b.data["DM"]
            elif term.kind == "adj":
                G[b.elems] += w * b.data["G"]
                H[b.elems] += w * b.data["H"]
                Q[b.elems] += w * b.data["Q"]
            else:
                w0 += w
        return dict(DM=DM, G=G, H=H, Q=Q, w0=w0)

    def local(self, weights) -> LocalOperators:
        b = self.effective_blocks(weights)
        return local_operators(self.geo, self.problem.nu, np.arange(self.mesh.n_elements),
                               b["DM"], b["G"], b["H"], b["Q"], self.const.data, b["w0"])

    def _local_index(self):
        lay = self.layout
        E, n = lay.n_elements, lay.n_local
        s = lay.slices()
        e = np.arange(E)[:, None]
        a = np.arange(n)[None, :]
        cols = np.empty((E, 7 * n), dtype=np.int64)
        for i in range(2):
            for j in range(2):
                cols[:, (2 * i + j) * n:(2 * i + j + 1) * n] = s["L"].start + ((e * 2 + i) * 2 + j) * n + a
        for j in range(2):
            cols[:, 4 * n + j * n:4 * n + (j + 1) * n] = s["u"].start + (e * 2 + j) * n + a
        cols[:, 6 * n:] = s["p"].start + e * n + a
        rows = np.concatenate([cols, (lay.size + np.arange(E))[:, None]], axis=1)
        return rows, cols

    def matrix(self, t: int) -> sp.csr_matrix:
        """Monolithic sparse matrix of operator term t (rows: equations, columns: unknowns)."""
        with self._lock:
            if t in self._matrices:
                return self._matrices[t]
        term = self.terms[t]
        geo, lay = self.geo, self.layout
        b = term.blocks
        elems = b.elems
        kw = {}
        if term.kind == "det":
            kw = dict(DM=b.data["DM"])
        elif term.kind == "adj":
            kw = dict(G=b.data["G"], H=b.data["H"], Q=b.data["Q"])
        else:
            kw = dict(const=b.data, w0=1.0)
        lo = local_operators(geo, self.problem.nu, elems, with_multiplier=False, **kw)
        rows_l, cols_l = self._local_index()
        rows_l, cols_l = rows_l[elems], cols_l[elems]
        m = 7 * geo.n
        tdofs = geo.trace_dofs[elems].reshape(len(elems), -1)
        R, Cc, V = [], [], []

        def put(r, c, v):
            r, c, v = np.broadcast_arrays(r, c, v)
            keep = (r >= 0) & (c >= 0) & (v != 0)
            R.append(r[keep])
            Cc.append(c[keep])
            V.append(v[keep])

        put(rows_l[:, :, None], cols_l[:, None, :], lo.K[:, :, :m])
        put(rows_l[:, :, None], tdofs[:, None, :], -lo.B)
        put(rows_l, (lay.n_trace + elems)[:, None], -lo.b_rho)
        put(tdofs[:, :, None], cols_l[:, None, :], lo.T[:, :, :m])
        put(tdofs[:, :, None], tdofs[:, None, :], lo.D)
        put((lay.n_trace + elems)[:, None], tdofs, lo.C)
        A = sp.coo_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(Cc))),
                          shape=(lay.n_rows, lay.size)).tocsr()
        A.sum_duplicates()
        with self._lock:
            self._matrices[t] = A
        return A

    def apply(self, weights, x) -> np.ndarray:
        out = np.zeros(self.layout.n_rows)
        for t, w in enumerate(weights):
            if w != 0.0:
                out += w * (self.matrix(t) @ x)
        return out

    # -- solves -------------------------------------------------------------
    def solve(self, weights, rhs, check_compat: bool = False) -> np.ndarray:
        """Solve K(weights) x = rhs by static condensation; rhs is in equation layout."""
        geo, lay = self.geo, self.layout
        E, n, K = lay.n_elements, geo.n, geo.K
        nt = 6 * K
        lo = self.local(weights)
        rows_l, _ = self._local_index()
        r_loc = rhs[rows_l]
        rs = lay.row_slices()
        r_tr = rhs[rs["trace"]]
        r_c = rhs[rs["compat"]]
        try:
            Z = np.linalg.solve(lo.K, np.concatenate([lo.B, lo.b_rho[:, :, None], r_loc[:, :, None]], axis=2))
        except np.linalg.LinAlgError as exc:
            raise SolverError("singular local matrix") from exc
        TZ = lo.T @ Z
        Kuu = TZ[:, :, :nt] + lo.D
        Kur = TZ[:, :, nt]
        gr = TZ[:, :, nt + 1]
        td = geo.trace_dofs.reshape(E, nt)
        Nt = lay.n_trace
        extra = 1 if self.pure_dirichlet else 0
        size = Nt + E + extra
        R, Cc, V = [], [], []

        def put(r, c, v):
            r, c, v = np.broadcast_arrays(r, c, v)
            keep = (r >= 0) & (c >= 0)
            R.append(r[keep])
            Cc.append(c[keep])
            V.append(v[keep])

        put(td[:, :, None], td[:, None, :], Kuu)
        put(td, (Nt + np.arange(E))[:, None], Kur)
        put((Nt + np.arange(E))[:, None], td, lo.C)
        b = np.zeros(size)
        b[:Nt] = r_tr
        ok = td >= 0
        np.add.at(b, td[ok], -gr[ok])
        b[Nt:Nt + E] = r_c
        if extra:
            if check_compat:
                scale = np.abs(r_c).sum() + 1e-300
                if abs(r_c.sum()) > max(1e-8 * scale, 1e-12):
                    raise SolverError(f"Dirichlet data violate the compatibility condition ({r_c.sum():.3e})")
            put(np.arange(Nt, Nt + E), np.full(E, size - 1), np.ones(E))
            put(np.full(E, size - 1), np.arange(Nt, Nt + E), geo.area)
        A = sp.csc_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(Cc))), shape=(size, size))
        try:
            y = spla.splu(A).solve(b)
        except RuntimeError as exc:
            raise SolverError(f"singular global system: {exc}") from exc
        if not np.all(np.isfinite(y)):
            raise SolverError("global solve produced non-finite values")
        uh = np.where(td >= 0, y[np.maximum(td, 0)], 0.0)
        rho = y[Nt:Nt + E]
        xl = (Z[:, :, :nt] @ uh[:, :, None])[:, :, 0] + Z[:, :, nt] * rho[:, None] + Z[:, :, nt + 1]
        x = np.zeros(lay.size)
        _, cols_l = self._local_index()
        x[cols_l] = xl[:, :7 * n]
        x[: Nt] = y[:Nt]
        x[Nt:Nt + E] = rho
        with self._lock:
            self.n_solves += 1
        return x

    def solve_at(self, mu) -> FullOrderSolution:
        mu = tuple(np.atleast_1d(np.asarray(mu, dtype=float)).tolist())
        x = self.solve(self.weights_at(mu), self.rhs_at(mu), check_compat=True)
        return FullOrderSolution.from_vector(self.layout, x, mu)

    def residual(self, mu, x) -> np.ndarray:
        return self.apply(self.weights_at(mu), x) - self.rhs_at(mu)


# ---------------------------------------------------------------------------
# drag


def surface_faces(mesh: ReferenceMesh, markers: Sequence[int]) -> np.ndarray:
    return np.flatnonzero(np.isin(mesh.face_markers, list(markers)) & (mesh.face_elements[:, 1] < 0))


def drag_functional(system: HDGSystem, faces: np.ndarray, mu=None) -> np.ndarray:
    """Matrix (2, size) mapping a stacked solution to the force it exerts on the surface `faces`.

    The traction (-p I - (L + L^T)) n is integrated over the reference surface with n pointing
    from the body into the fluid.  With mu given, n ds is replaced by adj(J_mu) n ds (the mapped
    surface).
    """
    faces = np.asarray(faces)
    if not len(faces):
        raise ValueError("empty surface")
    geo, lay, mesh = system.geo, system.layout, system.mesh
    n = geo.n
    s = lay.slices()
    out = np.zeros((2, lay.size))
    for F in faces:
        e, f = int(mesh.face_elements[F, 0]), int(mesh.face_local[F, 0])
        nb = -geo.nf[e, f] * geo.wf[e, f][:, None]
        if mu is not None:
            A = np.einsum("k,kqij->qij", system.jac.adj_factors(mu), system._Af[:, e, f])
            nb = np.einsum("qij,qj->qi", A, nb)
        N = geo.Nf[e, f]
        for i in range(2):
            pc = s["p"].start + e * n
            out[i, pc:pc + n] += -np.einsum("q,qa->a", nb[:, i], N)
            for j in range(2):
                c1 = s["L"].start + ((e * 2 + i) * 2 + j) * n
                c2 = s["L"].start + ((e * 2 + j) * 2 + i) * n
                contrib = -np.einsum("q,qa->a", nb[:, j], N)
                out[i, c1:c1 + n] += contrib
                out[i, c2:c2 + n] += contrib
    return out


def compute_drag(system: HDGSystem, sol, faces, mu=None) -> np.ndarray:
    x = sol.vector() if isinstance(sol, FullOrderSolution) else np.asarray(sol)
    return drag_functional(system, faces, mu) @ x


# ---------------------------------------------------------------------------
# functional entry points


def assemble_local(mesh: ReferenceMesh, problem: StokesProblem, mapping: SeparatedMapping, mu,
                   system: HDGSystem | None = None) -> LocalOperators:
    system = system or HDGSystem(mesh, problem, mapping)
    return system.local(system.weights_at(mu))


def solve_full_order(mesh: ReferenceMesh, problem: StokesProblem, mapping: SeparatedMapping | None, mu=(),
                     system: HDGSystem | None = None) -> FullOrderSolution:
    system = system or HDGSystem(mesh, problem, mapping)
    return system.solve_at(mu)
