"""Lions non-overlapping domain decomposition on the transformed problem.

Each partition subdomain solves an independent Robin problem per sweep,
exchanging value and one-sided normal-flux traces with its neighbours
from the previous iterate (Jacobi style). The QoI error of an iterate
splits exactly into discretization (DE), iteration (IE) and interface
continuity (CE) contributions, evaluated with shared edge quadrature so
the three terms sum to the single-expression residual identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import quadrature as quad
from .estimate import AdjointField
from .fem import AssemblyError, FeSpace, Field, _element_geometry, p1_values, P1_GRADS
from .geometry import TransformedCoefficients
from .mesh import TriMesh


class LionsError(RuntimeError):
    """Invalid configuration or failed subdomain solve."""


@dataclass(frozen=True)
class LionsConfig:
    """Robin parameter, sweep budget and snapshot stride."""

    lam: float = 5.0
    max_iterations: int = 100
    record_stride: int = 1
    # stop once |IE| < ie_stop_ratio * |DE| holds this many times in a row
    early_stop: bool = False
    ie_stop_ratio: float = 0.01
    ie_stop_runs: int = 3

    def __post_init__(self):
        if self.lam < 0:
            raise LionsError("lambda must be nonnegative")
        if self.max_iterations < 1:
            raise LionsError("need at least one iteration")


@dataclass(frozen=True)
class LionsIterate:
    """Per-subdomain P1 solutions after one Jacobi sweep."""

    iteration: int
    values: list  # coefficient vector per subdomain (local vertex numbering)
    op: "LionsOperator"


@dataclass(frozen=True)
class LionsBreakdown:
    """Three-way split of the QoI error at one iterate."""

    iteration: int
    de: float
    ie: float
    ce: float
    qoi: float
    reference_error: Optional[float] = None
    effectivity: Optional[float] = None

    @property
    def total(self):
        return self.de + self.ie + self.ce


class _Subdomain:
    """Local P1 problem of one partition subdomain."""

    def __init__(self, mesh, coeffs, d, lam):
        self.d = d
        self.tri_ids = np.flatnonzero(mesh.tags == d)
        if len(self.tri_ids) == 0:
            raise LionsError(f"subdomain {d} has no triangles")
        tris = mesh.triangles[self.tri_ids]
        self.local_verts = np.unique(tris)
        glob_to_loc = -np.ones(mesh.num_vertices, dtype=np.int64)
        glob_to_loc[self.local_verts] = np.arange(len(self.local_verts))
        self.glob_to_loc = glob_to_loc
        self.tris_local = glob_to_loc[tris]
        self.points = mesh.vertices[self.local_verts]
        self.n_local = len(self.local_verts)

        # geometry and coefficient evaluations on the subdomain elements
        p = self.points[self.tris_local]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.area = 0.5 * np.abs(det)
        binv_t = np.empty((len(p), 2, 2))
        binv_t[:, 0, 0] = e2[:, 1] / det
        binv_t[:, 0, 1] = -e1[:, 1] / det
        binv_t[:, 1, 0] = -e2[:, 0] / det
        binv_t[:, 1, 1] = e1[:, 0] / det
        self.grads = np.einsum("tij,nj->tni", binv_t, P1_GRADS)  # (T, 3, 2)
        qpts = np.einsum("qk,tkd->tqd", quad.TRI_BARY, p)
        flat = qpts.reshape(-1, 2)
        tags = np.full(len(flat), d)
        Q = quad.TRI_BARY.shape[0]
        self.a_q = coeffs.diffusion(flat, tags).reshape(len(p), Q, 2, 2)
        self.f_q = coeffs.source(flat, tags).reshape(len(p), Q)
        self.psi_q = coeffs.qoi_weight(flat, tags).reshape(len(p), Q)

        w = quad.TRI_WEIGHTS
        agrad = np.einsum("tqij,tnj->tqni", self.a_q, self.grads)
        local_K = np.einsum("q,t,tqnj,tmj->tmn", w, self.area, agrad, self.grads)
        vals = p1_values(quad.TRI_POINTS)
        self.load = np.zeros(self.n_local)
        np.add.at(
            self.load,
            self.tris_local.ravel(),
            np.einsum("q,t,tq,qm->tm", w, self.area, self.f_q, vals).ravel(),
        )
        rows = np.repeat(self.tris_local, 3, axis=1).ravel()
        cols = np.tile(self.tris_local, (1, 3)).ravel()
        self.K = sp.coo_matrix(
            (local_K.ravel(), (rows, cols)), shape=(self.n_local, self.n_local)
        ).tocsr()

        # Dirichlet vertices: on the outer boundary of the global mesh
        bnd = set(mesh.boundary_vertices.tolist())
        self.dirichlet_local = np.array(
            sorted(glob_to_loc[v] for v in self.local_verts if v in bnd), dtype=np.int64
        )
        self.lam = lam
        self.edges = []  # filled by the operator
        self.lu = None

    def finalize(self):
        """Add Robin mass terms for interface edges and factorize."""
        M = sp.lil_matrix((self.n_local, self.n_local))
        for e in self.edges:
            i, j = e.local_dofs
            L = e.length
            M[i, i] += L / 3.0
            M[j, j] += L / 3.0
            M[i, j] += L / 6.0
            M[j, i] += L / 6.0
        A = (self.K + self.lam * M.tocsr()).tolil()
        free = np.ones(self.n_local, dtype=bool)
        free[self.dirichlet_local] = False
        self.free = np.flatnonzero(free)
        A = A.tocsr()[self.free][:, self.free].tocsc()
        if len(self.edges) == 0 and len(self.dirichlet_local) == 0:
            raise LionsError(f"subdomain {self.d} has neither boundary nor interfaces")
        if self.lam == 0 and len(self.dirichlet_local) == 0:
            raise LionsError(
                f"subdomain {self.d} is singular: lambda = 0 with pure-interface boundary"
            )
        self.lu = spla.splu(A)

    def solve(self, rhs):
        x = np.zeros(self.n_local)
        x[self.free] = self.lu.solve(rhs[self.free])
        return x


class _InterfaceEdge:
    """One mesh edge on the interface between two subdomains, seen from one side."""

    __slots__ = (
        "verts",
        "local_dofs",
        "neighbor",
        "twin",
        "points",
        "normal",
        "length",
        "grad_tri_local",
        "a_q",
        "shape",
    )


def _edge_shape_functions():
    """P1 trace values of the two edge endpoints at the edge Gauss points."""
    t = quad.EDGE_POINTS
    return np.column_stack([1.0 - t, t])  # (3, 2)


class LionsOperator:
    """Precomputed subdomain problems and interface pairings for one sample."""

    def __init__(self, mesh: TriMesh, coeffs: TransformedCoefficients, config: LionsConfig):
        if coeffs.has_convection:
            raise LionsError("the Lions iteration supports the symmetric form only")
        self.mesh = mesh
        self.coeffs = coeffs
        self.config = config
        tags = np.unique(mesh.tags)
        self.subdomain_ids = tags
        self.subs = {int(d): _Subdomain(mesh, coeffs, int(d), config.lam) for d in tags}

        shape = _edge_shape_functions()
        iface_edges, iface_tags = mesh.interface_edges
        edges_all = mesh.edges
        # map sorted vertex pair -> edge row for adjacency lookup
        adj = mesh.edge_tri
        pair_to_eid = {tuple(e): k for k, e in enumerate(edges_all)}
        for verts, (d0, d1) in zip(iface_edges, iface_tags):
            eid = pair_to_eid[tuple(verts)]
            t0, t1 = adj[eid]
            sides = {int(mesh.tags[t0]): t0, int(mesh.tags[t1]): t1}
            made = {}
            for d in (int(d0), int(d1)):
                sub = self.subs[d]
                tri = sides[d]
                e = _InterfaceEdge()
                e.verts = verts
                e.local_dofs = sub.glob_to_loc[verts]
                p0, p1 = mesh.vertices[verts[0]], mesh.vertices[verts[1]]
                e.length = float(np.linalg.norm(p1 - p0))
                e.points = quad.edge_points(p0[None, :], p1[None, :])[0]  # (3, 2)
                # outward normal from side d: edge direction as traversed CCW in tri
                tri_v = mesh.triangles[tri]
                k = int(np.flatnonzero(tri_v == verts[0])[0])
                if tri_v[(k + 1) % 3] == verts[1]:
                    dvec = p1 - p0
                else:
                    dvec = p0 - p1
                n = np.array([dvec[1], -dvec[0]])
                e.normal = n / np.linalg.norm(n)
                e.grad_tri_local = int(np.flatnonzero(sub.tri_ids == tri)[0])
                e.a_q = coeffs.diffusion(e.points, np.full(3, d))
                e.shape = shape
                sub.edges.append(e)
                made[d] = e
            made[int(d0)].neighbor = int(d1)
            made[int(d1)].neighbor = int(d0)
            made[int(d0)].twin = made[int(d1)]
            made[int(d1)].twin = made[int(d0)]

        for sub in self.subs.values():
            sub.finalize()

    # trace helpers -------------------------------------------------------
    def edge_values(self, values, d, e):
        """Trace of subdomain d's field on edge e at the Gauss points."""
        vals = values[d][e.local_dofs]
        return e.shape @ vals

    def edge_flux(self, values, d, e):
        """One-sided n_d . (A_d grad U_d) at the Gauss points."""
        sub = self.subs[d]
        tri = e.grad_tri_local
        grad = sub.grads[tri].T @ values[d][sub.tris_local[tri]]
        return np.einsum("qij,j,i->q", e.a_q, grad, e.normal)

    def _edge_int(self, e, integrand):
        """Integral over edge e of values sampled at the Gauss points."""
        return e.length * float(quad.EDGE_WEIGHTS @ integrand)

    # iteration -----------------------------------------------------------
    def initial_iterate(self, values=None):
        if values is None:
            values = {int(d): np.zeros(self.subs[int(d)].n_local) for d in self.subdomain_ids}
        return LionsIterate(0, values, self)

    def step(self, iterate: LionsIterate) -> LionsIterate:
        """One Jacobi sweep: every subdomain solves with iteration i-1 data."""
        prev = iterate.values
        lam = self.config.lam
        new_values = {}
        for d, sub in self.subs.items():
            rhs = sub.load.copy()
            for e in sub.edges:
                nb = e.neighbor
                u_nb = self.edge_values(prev, nb, e.twin)
                q_nb = self.edge_flux(prev, nb, e.twin)
                g = lam * u_nb - q_nb
                contrib = e.length * np.einsum("q,q,qm->m", quad.EDGE_WEIGHTS, g, e.shape)
                rhs[e.local_dofs] += contrib
            new_values[d] = sub.solve(rhs)
        return LionsIterate(iterate.iteration + 1, new_values, self)

    # functionals ---------------------------------------------------------
    def qoi(self, iterate: LionsIterate) -> float:
        total = 0.0
        vals = p1_values(quad.TRI_POINTS)
        for d, sub in self.subs.items():
            u_q = (iterate.values[d][sub.tris_local]) @ vals.T
            total += float(
                np.einsum("q,t,tq,tq->", quad.TRI_WEIGHTS, sub.area, u_q, sub.psi_q)
            )
        return total

    def broken_h1_distance(self, it_a: LionsIterate, it_b: LionsIterate) -> float:
        total = 0.0
        for d, sub in self.subs.items():
            diff = it_a.values[d] - it_b.values[d]
            g = np.einsum("tni,tn->ti", sub.grads, diff[sub.tris_local])
            total += float(np.einsum("t,ti,ti->", sub.area, g, g))
            vals = p1_values(quad.TRI_POINTS)
            v_q = diff[sub.tris_local] @ vals.T
            total += float(np.einsum("q,t,tq,tq->", quad.TRI_WEIGHTS, sub.area, v_q, v_q))
        return float(np.sqrt(total))

    def restrict_field(self, field: Field) -> LionsIterate:
        """Monolithic P1 field as a (converged-style) iterate."""
        if field.space.degree != 1:
            raise LionsError("only P1 fields restrict onto subdomain iterates")
        values = {
            int(d): field.coefficients[self.subs[int(d)].local_verts]
            for d in self.subdomain_ids
        }
        return LionsIterate(0, values, self)

    # adjoint traces ------------------------------------------------------
    def _adjoint_edge_data(self, adjoint: AdjointField, d, e):
        """(eta values, skew-symmetrized adjoint flux g_hat) on edge e, side d."""
        fld = adjoint.field
        mesh = self.mesh
        sub = self.subs[d]
        tri_global = sub.tri_ids[e.grad_tri_local]
        # reference coordinates of the edge Gauss points inside that triangle
        tri_v = mesh.triangles[tri_global]
        p = mesh.vertices[tri_v]
        B = np.column_stack([p[1] - p[0], p[2] - p[0]])
        ref = np.linalg.solve(B, (e.points - p[0]).T).T
        from .fem import p2_values, p2_grads

        dofs = fld.space.tri_dofs[tri_global]
        local = fld.coefficients[dofs]
        eta = p2_values(ref) @ local
        gref = p2_grads(ref)  # (3, 6, 2)
        binv_t = np.linalg.inv(B).T
        grad = np.einsum("ij,qnj,n->qi", binv_t, gref, local)
        flux_own = np.einsum("qij,qj,i->q", e.a_q, grad, e.normal)
        return eta, flux_own

    def adjoint_edge_values(self, adjoint, d, e):
        eta, _ = self._adjoint_edge_data(adjoint, d, e)
        return eta

    def adjoint_flux_hat(self, adjoint, d, e):
        """Single-valued flux 0.5*(g_d - g_dtilde), odd under side swap."""
        _, own = self._adjoint_edge_data(adjoint, d, e)
        _, other = self._adjoint_edge_data(adjoint, e.neighbor, e.twin)
        return 0.5 * (own - other)

    def volume_residual(self, iterate: LionsIterate, adjoint: AdjointField) -> float:
        """Sum over subdomains of (F, eta)_d - (A grad U_d, grad eta)_d."""
        mesh = self.mesh
        det, _, points = _element_geometry(mesh)
        area = 0.5 * np.abs(det)
        eta_q = adjoint.field.element_values(quad.TRI_POINTS)
        geta_q = adjoint.field.element_gradients(quad.TRI_POINTS)
        total = 0.0
        w = quad.TRI_WEIGHTS
        for d, sub in self.subs.items():
            ids = sub.tri_ids
            total += float(
                np.einsum("q,t,tq,tq->", w, sub.area, sub.f_q, eta_q[ids])
            )
            gu = np.einsum("tni,tn->ti", sub.grads, iterate.values[d][sub.tris_local])
            agu = np.einsum("tqij,tj->tqi", sub.a_q, gu)
            total -= float(np.einsum("q,t,tqi,tqi->", w, sub.area, agu, geta_q[ids]))
        return total


def lions_solve(
    mesh: TriMesh,
    coeffs: TransformedCoefficients,
    config: LionsConfig,
    initial=None,
    operator: LionsOperator = None,
):
    """Run the discrete Lions iteration; returns the recorded iterates.

    Iterate 0 is the initial guess; iterates are recorded every
    record_stride sweeps (the final sweep always included).
    """
    op = operator if operator is not None else LionsOperator(mesh, coeffs, config)
    it = op.initial_iterate(initial)
    recorded = [it]
    for i in range(config.max_iterations):
        it = op.step(it)
        if (it.iteration % config.record_stride == 0) or (
            it.iteration == config.max_iterations
        ):
            recorded.append(it)
    if recorded[-1].iteration != it.iteration:
        recorded.append(it)
    return recorded


def lions_breakdown(
    prev: LionsIterate,
    curr: LionsIterate,
    adjoint: AdjointField,
    coeffs: TransformedCoefficients,
) -> LionsBreakdown:
    """DE/IE/CE split of the QoI error at iterate curr.

    DE is the Robin-equation residual tested with the adjoint, IE collects
    changes between the data of sweeps i-1 and i, and CE the interface
    continuity defect of sweep i. All interface integrals share the same
    Gauss points, so DE + IE + CE reproduces the single-expression residual
    exactly.
    """
    if curr.op is not prev.op:
        raise LionsError("iterates come from different operators")
    if prev.iteration != curr.iteration - 1:
        raise LionsError("breakdown needs consecutive iterates")
    op = curr.op
    lam = op.config.lam

    de = op.volume_residual(curr, adjoint)
    ie = 0.0
    ce = 0.0
    for d, sub in op.subs.items():
        for e in sub.edges:
            nb = e.neighbor
            eta = op.adjoint_edge_values(adjoint, d, e)
            u_curr = op.edge_values(curr.values, d, e)
            u_prev = op.edge_values(prev.values, d, e)
            u_nb_prev = op.edge_values(prev.values, nb, e.twin)
            u_nb_curr = op.edge_values(curr.values, nb, e.twin)
            q_curr = op.edge_flux(curr.values, d, e)
            q_prev = op.edge_flux(prev.values, d, e)
            q_nb_prev = op.edge_flux(prev.values, nb, e.twin)
            q_nb_curr = op.edge_flux(curr.values, nb, e.twin)
            g_hat = op.adjoint_flux_hat(adjoint, d, e)

            de += op._edge_int(e, (-lam * u_curr + lam * u_nb_prev - q_nb_prev) * eta)
            ie += op._edge_int(e, (lam * (u_curr - u_prev) + (q_prev - q_curr)) * eta)
            ce += 0.5 * op._edge_int(e, (q_curr + q_nb_curr) * eta)
            ce += 0.5 * op._edge_int(e, g_hat * (u_curr - u_nb_curr))
    return LionsBreakdown(curr.iteration, de, ie, ce, qoi=op.qoi(curr))


def single_expression_estimate(
    curr: LionsIterate, adjoint: AdjointField, coeffs: TransformedCoefficients
) -> float:
    """Ungrouped residual: volume terms plus the adjoint-flux interface term."""
    op = curr.op
    total = op.volume_residual(curr, adjoint)
    for d, sub in op.subs.items():
        for e in sub.edges:
            g_hat = op.adjoint_flux_hat(adjoint, d, e)
            u = op.edge_values(curr.values, d, e)
            total += op._edge_int(e, g_hat * u)
    return total


def run_lions_analysis(
    mesh: TriMesh,
    coeffs: TransformedCoefficients,
    config: LionsConfig,
    adjoint: AdjointField,
    reference_qoi: Optional[float] = None,
):
    """Iterate + per-sweep breakdown, with the optional IE-based early stop.

    Returns (breakdowns, final iterate). When reference_qoi is given each
    breakdown carries the reference error and effectivity.
    """
    op = LionsOperator(mesh, coeffs, config)
    it = op.initial_iterate()
    breakdowns = []
    small_runs = 0
    for i in range(1, config.max_iterations + 1):
        new_it = op.step(it)
        bd = lions_breakdown(it, new_it, adjoint, coeffs)
        if reference_qoi is not None:
            ref_err = reference_qoi - bd.qoi
            eff = bd.total / ref_err if abs(ref_err) > 1e-14 else None
            bd = LionsBreakdown(
                bd.iteration, bd.de, bd.ie, bd.ce, bd.qoi,
                reference_error=ref_err, effectivity=eff,
            )
        it = new_it
        if i % config.record_stride == 0 or i == config.max_iterations:
            breakdowns.append(bd)
        if config.early_stop:
            if abs(bd.ie) < config.ie_stop_ratio * abs(bd.de):
                small_runs += 1
                if small_runs >= config.ie_stop_runs:
                    if breakdowns[-1].iteration != bd.iteration:
                        breakdowns.append(bd)
                    break
            else:
                small_runs = 0
    return breakdowns, it
