"""P1/P2 continuous finite elements for the transformed problems.

Assembly evaluates the pulled-back coefficients at quadrature points and
eliminates Dirichlet rows and columns symmetrically. The symmetric solve
is a Jacobi-preconditioned conjugate gradient; systems with convection
go through a sparse direct factorization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import quadrature as quad
from .geometry import (
    AffineMapSet,
    BoundarySample,
    Partition,
    ProblemData,
    TransformedCoefficients,
    affine_maps,
    identity_maps,
    transform_coefficients,
)
from .mesh import TriMesh, refine_all


class AssemblyError(ValueError):
    """Assembly failed (inconsistent inputs or non-SPD coefficient)."""


class SolverError(RuntimeError):
    """Linear solver did not converge."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals if residuals is not None else []


def p1_values(points):
    """P1 basis values at reference points (Q, 2) -> (Q, 3)."""
    xi, eta = points[:, 0], points[:, 1]
    return np.column_stack([1.0 - xi - eta, xi, eta])


P1_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p2_values(points):
    """P2 basis values, local order (v0, v1, v2, m01, m12, m20)."""
    xi, eta = points[:, 0], points[:, 1]
    lam = np.column_stack([1.0 - xi - eta, xi, eta])
    vals = np.empty((len(points), 6))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
    vals[:, 3] = 4.0 * lam[:, 0] * lam[:, 1]
    vals[:, 4] = 4.0 * lam[:, 1] * lam[:, 2]
    vals[:, 5] = 4.0 * lam[:, 2] * lam[:, 0]
    return vals


def p2_grads(points):
    """P2 reference gradients, (Q, 6, 2)."""
    xi, eta = points[:, 0], points[:, 1]
    lam = np.column_stack([1.0 - xi - eta, xi, eta])
    dlam = P1_GRADS
    g = np.empty((len(points), 6, 2))
    for i in range(3):
        g[:, i, :] = (4.0 * lam[:, i, None] - 1.0) * dlam[i]
    g[:, 3, :] = 4.0 * (lam[:, 0, None] * dlam[1] + lam[:, 1, None] * dlam[0])
    g[:, 4, :] = 4.0 * (lam[:, 1, None] * dlam[2] + lam[:, 2, None] * dlam[1])
    g[:, 5, :] = 4.0 * (lam[:, 2, None] * dlam[0] + lam[:, 0, None] * dlam[2])
    return g


@dataclass(frozen=True)
class FeSpace:
    """Global dof enumeration for continuous P1 or P2 elements.

    P1 dofs are the mesh vertices; P2 adds one dof per edge (midpoint).
    Dirichlet dofs are exactly those on boundary edges.
    """

    mesh: TriMesh
    degree: int

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise AssemblyError("degree must be 1 or 2")

    @property
    def num_dofs(self):
        if self.degree == 1:
            return self.mesh.num_vertices
        return self.mesh.num_vertices + len(self.mesh.edges)

    @property
    def tri_dofs(self):
        """(T, 3) or (T, 6) global dofs per triangle."""
        t = self.mesh.triangles
        if self.degree == 1:
            return t
        edge_dofs = self.mesh.num_vertices + self.mesh.tri_to_edge
        return np.hstack([t, edge_dofs])

    @property
    def dirichlet_dofs(self):
        verts = self.mesh.boundary_vertices
        if self.degree == 1:
            return verts
        return np.concatenate(
            [verts, self.mesh.num_vertices + self.mesh.boundary_edge_ids]
        )

    @property
    def free_dofs(self):
        mask = np.ones(self.num_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)

    def dof_points(self):
        """Coordinates of every dof (vertices, then edge midpoints for P2)."""
        if self.degree == 1:
            return self.mesh.vertices.copy()
        mids = 0.5 * (
            self.mesh.vertices[self.mesh.edges[:, 0]]
            + self.mesh.vertices[self.mesh.edges[:, 1]]
        )
        return np.vstack([self.mesh.vertices, mids])


@dataclass(frozen=True)
class Field:
    """Scalar finite element function given by its coefficient vector."""

    space: FeSpace
    coefficients: np.ndarray
    residual: Optional[float] = None

    def __post_init__(self):
        coeffs = np.ascontiguousarray(self.coefficients, dtype=float)
        if coeffs.shape != (self.space.num_dofs,):
            raise AssemblyError("coefficient vector length does not match the space")
        object.__setattr__(self, "coefficients", coeffs)

    def element_values(self, ref_points):
        """Values at reference points per element, (T, Q)."""
        if self.space.degree == 1:
            basis = p1_values(ref_points)
        else:
            basis = p2_values(ref_points)
        local = self.coefficients[self.space.tri_dofs]
        return local @ basis.T

    def element_gradients(self, ref_points):
        """Physical gradients at reference points per element, (T, Q, 2)."""
        mesh = self.space.mesh
        p = mesh.corners()
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        binv_t = np.empty((mesh.num_triangles, 2, 2))
        binv_t[:, 0, 0] = e2[:, 1] / det
        binv_t[:, 0, 1] = -e1[:, 1] / det
        binv_t[:, 1, 0] = -e2[:, 0] / det
        binv_t[:, 1, 1] = e1[:, 0] / det
        local = self.coefficients[self.space.tri_dofs]
        if self.space.degree == 1:
            ref = local @ P1_GRADS  # (T, 2), constant
            grads = np.einsum("tij,tj->ti", binv_t, ref)
            return np.broadcast_to(grads[:, None, :], (mesh.num_triangles, len(ref_points), 2)).copy()
        gref = p2_grads(ref_points)  # (Q, 6, 2)
        ref = np.einsum("ti,qid->tqd", local, gref)
        return np.einsum("tij,tqj->tqi", binv_t, ref)


@dataclass(frozen=True)
class LinearSystem:
    """Reduced system over free dofs after symmetric Dirichlet elimination."""

    space: FeSpace
    matrix: sp.csr_matrix
    rhs: np.ndarray
    symmetric: bool

    @property
    def num_free(self):
        return self.matrix.shape[0]

    def expand(self, free_values):
        """Insert free-dof values into a full coefficient vector (zeros on Dirichlet dofs)."""
        full = np.zeros(self.space.num_dofs)
        full[self.space.free_dofs] = free_values
        return full


def _element_geometry(mesh):
    p = mesh.corners()
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    binv_t = np.empty((mesh.num_triangles, 2, 2))
    binv_t[:, 0, 0] = e2[:, 1] / det
    binv_t[:, 0, 1] = -e1[:, 1] / det
    binv_t[:, 1, 0] = -e2[:, 0] / det
    binv_t[:, 1, 1] = e1[:, 0] / det
    points = quad.triangle_points(p)  # (T, Q, 2)
    return det, binv_t, points


def _eval_coeffs(coeffs, mesh, points, need_convection):
    T, Q = points.shape[:2]
    flat = points.reshape(-1, 2)
    tags = np.repeat(mesh.tags, Q)
    a = coeffs.diffusion(flat, tags).reshape(T, Q, 2, 2)
    flat_a = a.reshape(-1, 2, 2)
    det_a = flat_a[:, 0, 0] * flat_a[:, 1, 1] - flat_a[:, 0, 1] * flat_a[:, 1, 0]
    not_spd = (flat_a[:, 0, 0] <= 0) | (det_a <= 0)
    if np.any(not_spd):
        bad = int(np.argmax(not_spd))
        raise AssemblyError(
            f"non-SPD diffusion at a quadrature point of subdomain {tags[bad]}"
        )
    f = coeffs.source(flat, tags).reshape(T, Q)
    b = None
    if need_convection:
        b = coeffs.convection(flat, tags)
        if b is None:
            raise AssemblyError("convection requested but problem data has none")
        b = b.reshape(T, Q, 2)
    return a, f, b


def assemble(
    mesh: TriMesh,
    coeffs: TransformedCoefficients,
    degree: int = 1,
    convection: bool = False,
    adjoint: bool = False,
) -> LinearSystem:
    """Assemble the discrete transformed problem.

    Entries are quadrature evaluations of A grad(phi_j) . grad(phi_i)
    plus, with convection, (b . grad phi_j) phi_i; the adjoint flag moves
    the convection onto the test gradient and loads the system with the
    transformed QoI weight instead of the source.
    """
    space = FeSpace(mesh, degree)
    det, binv_t, points = _element_geometry(mesh)
    a, f, b = _eval_coeffs(coeffs, mesh, points, convection)
    if adjoint:
        flat = points.reshape(-1, 2)
        tags = np.repeat(mesh.tags, points.shape[1])
        f = coeffs.qoi_weight(flat, tags).reshape(points.shape[:2])

    w = quad.TRI_WEIGHTS
    area = 0.5 * np.abs(det)
    if degree == 1:
        vals = p1_values(quad.TRI_POINTS)  # (Q, 3)
        grads = np.einsum("tij,nj->tni", binv_t, P1_GRADS)  # (T, 3, 2)
        agrad = np.einsum("tqij,tnj->tqni", a, grads)
        # rows m = test, cols n = trial
        local = np.einsum("q,t,tqnj,tmj->tmn", w, area, agrad, grads)
        if convection:
            bg = np.einsum("tqi,tni->tqn", b, grads)  # b . grad(trial)
            conv = np.einsum("q,t,tqn,qm->tmn", w, area, bg, vals)
            local = local + (conv.transpose(0, 2, 1) if adjoint else conv)
        load = np.einsum("q,t,tq,qm->tm", w, area, f, vals)
    else:
        vals = p2_values(quad.TRI_POINTS)  # (Q, 6)
        gref = p2_grads(quad.TRI_POINTS)  # (Q, 6, 2)
        grads = np.einsum("tij,qnj->tqni", binv_t, gref)  # (T, Q, 6, 2)
        agrad = np.einsum("tqij,tqnj->tqni", a, grads)
        local = np.einsum("q,t,tqni,tqmi->tmn", w, area, agrad, grads)
        if convection:
            bg = np.einsum("tqi,tqni->tqn", b, grads)
            conv = np.einsum("q,t,tqn,qm->tmn", w, area, bg, vals)
            local = local + (conv.transpose(0, 2, 1) if adjoint else conv)
        load = np.einsum("q,t,tq,qm->tm", w, area, f, vals)

    dofs = space.tri_dofs
    n_local = dofs.shape[1]
    rows = np.repeat(dofs, n_local, axis=1).ravel()
    cols = np.tile(dofs, (1, n_local)).ravel()
    K = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(space.num_dofs, space.num_dofs)
    ).tocsr()
    rhs = np.zeros(space.num_dofs)
    np.add.at(rhs, dofs.ravel(), load.ravel())

    free = space.free_dofs
    K_free = K[free][:, free].tocsr()
    rhs_free = rhs[free]
    return LinearSystem(space, K_free, rhs_free, symmetric=not convection)


def _pcg(A, b, tol, max_iter):
    """Jacobi-preconditioned conjugate gradient; returns (x, residual_history)."""
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolverError("non-positive diagonal in symmetric system")
    minv = 1.0 / diag
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, [0.0]
    z = minv * r
    p = r * minv
    rz = r @ z
    history = [1.0]
    for _ in range(max_iter):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        history.append(float(rel))
        if rel <= tol:
            return x, history
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"PCG did not reach tol={tol} in {max_iter} iterations", residuals=history
    )


def solve(system: LinearSystem, tol: float = 1e-10) -> Field:
    """Solve the reduced system and return the full-length Field.

    Symmetric systems use Jacobi-preconditioned CG to a relative residual
    of tol; systems with convection use a sparse direct factorization.
    """
    if system.num_free == 0:
        return Field(system.space, system.expand(np.empty(0)), residual=0.0)
    if system.symmetric:
        x, history = _pcg(
            system.matrix, system.rhs, tol, max_iter=10 * system.num_free + 1000
        )
        res = history[-1]
    else:
        lu = spla.splu(system.matrix.tocsc())
        x = lu.solve(system.rhs)
        bnorm = np.linalg.norm(system.rhs)
        res = float(
            np.linalg.norm(system.rhs - system.matrix @ x) / (bnorm if bnorm else 1.0)
        )
    return Field(system.space, system.expand(x), residual=res)


@dataclass(frozen=True)
class QoIValue:
    value: float
    sample_index: int = 0

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise AssemblyError("QoI evaluated to a non-finite value")

    def __float__(self):
        return float(self.value)


def qoi(field: Field, coeffs: TransformedCoefficients, mesh: TriMesh) -> QoIValue:
    """Q = integral of U * psi-tilde over the reference domain."""
    if field.space.mesh is not mesh and field.space.mesh.num_triangles != mesh.num_triangles:
        raise AssemblyError("field and mesh do not match")
    det, _, points = _element_geometry(mesh)
    Q = points.shape[1]
    flat = points.reshape(-1, 2)
    tags = np.repeat(mesh.tags, Q)
    psi = coeffs.qoi_weight(flat, tags).reshape(points.shape[:2])
    u = field.element_values(quad.TRI_POINTS)
    val = float(np.einsum("q,t,tq,tq->", quad.TRI_WEIGHTS, 0.5 * np.abs(det), u, psi))
    return QoIValue(val, coeffs.maps.sample_index)


def solve_sample(
    sample: BoundarySample,
    partition: Partition,
    data: ProblemData,
    mesh: TriMesh,
    degree: int = 1,
    tol: float = 1e-10,
):
    """Transformed solve for one realization: maps -> pullback -> solve -> QoI."""
    maps = affine_maps(partition, sample)
    coeffs = transform_coefficients(data, maps)
    system = assemble(mesh, coeffs, degree=degree, convection=data.has_convection)
    field = solve(system, tol=tol)
    q = qoi(field, coeffs, mesh)
    return field, q


def map_mesh_to_physical(mesh: TriMesh, maps: AffineMapSet) -> TriMesh:
    """Push mesh vertices through the inverse maps onto the realization.

    Vertices on subdomain interfaces may use either side's map; the
    piecewise map is continuous, so the result is independent of that
    choice.
    """
    vtag = np.full(mesh.num_vertices, -1, dtype=np.int64)
    for t in range(mesh.num_triangles):
        for v in mesh.triangles[t]:
            if vtag[v] < 0:
                vtag[v] = mesh.tags[t]
    mapped = maps.pull_back(mesh.vertices, vtag)
    return TriMesh(mapped, mesh.triangles.copy(), mesh.tags.copy(), mesh.generation.copy())


def solve_physical(
    sample: BoundarySample,
    partition: Partition,
    data: ProblemData,
    mesh: TriMesh,
    degree: int = 1,
    tol: float = 1e-10,
):
    """Oracle: assemble the untransformed problem on the mapped physical mesh."""
    maps = affine_maps(partition, sample)
    physical = map_mesh_to_physical(mesh, maps)
    raw = transform_coefficients(data, identity_maps(partition, sample.sample_index))
    system = assemble(physical, raw, degree=degree, convection=data.has_convection)
    field = solve(system, tol=tol)
    q = qoi(field, raw, physical)
    return field, q


@dataclass(frozen=True)
class ConditionEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def condition_estimate(system: LinearSystem, rel_tol: float = 1e-3, max_iter: int = 2000):
    """2-norm condition number by power and inverse power iteration."""
    if not system.symmetric:
        raise AssemblyError("condition estimate requires a symmetric system")
    A = system.matrix
    n = A.shape[0]
    if n == 1:
        return ConditionEstimate(1.0, True, 0)
    rng = np.random.Generator(np.random.Philox(12345))
    converged = True
    iters = 0

    def power(op):
        nonlocal converged, iters
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for k in range(max_iter):
            w = op(v)
            lam_new = float(v @ w)
            nrm = np.linalg.norm(w)
            v = w / nrm
            if k > 0 and abs(lam_new - lam) <= rel_tol * abs(lam_new):
                iters += k + 1
                return lam_new
            lam = lam_new
        converged = False
        iters += max_iter
        return lam

    lam_max = power(lambda v: A @ v)
    lu = spla.splu(A.tocsc())
    inv_lam = power(lu.solve)
    lam_min = 1.0 / inv_lam
    return ConditionEstimate(abs(lam_max / lam_min), converged, iters)


def l2_error(field: Field, exact):
    """L2 distance to a callable exact(x) evaluated by quadrature."""
    mesh = field.space.mesh
    det, _, points = _element_geometry(mesh)
    ue = exact(points.reshape(-1, 2)).reshape(points.shape[:2])
    uh = field.element_values(quad.TRI_POINTS)
    err2 = np.einsum("q,t,tq->", quad.TRI_WEIGHTS, 0.5 * np.abs(det), (uh - ue) ** 2)
    return float(np.sqrt(err2))


def h1_seminorm_error(field: Field, exact_grad):
    """H1 seminorm distance to a callable exact_grad(x) -> (n, 2)."""
    mesh = field.space.mesh
    det, _, points = _element_geometry(mesh)
    ge = exact_grad(points.reshape(-1, 2)).reshape(points.shape[0], points.shape[1], 2)
    gh = field.element_gradients(quad.TRI_POINTS)
    diff = gh - ge
    err2 = np.einsum("q,t,tqi,tqi->", quad.TRI_WEIGHTS, 0.5 * np.abs(det), diff, diff)
    return float(np.sqrt(err2))


def reference_mesh(mesh: TriMesh, sweeps: int = 2) -> TriMesh:
    """Uniformly refined companion mesh for reference solves."""
    return refine_all(mesh, 2 * sweeps)


def mass_matrix(space: FeSpace) -> sp.csr_matrix:
    """Consistent mass matrix over the free dofs."""
    mesh = space.mesh
    det, _, _ = _element_geometry(mesh)
    area = 0.5 * np.abs(det)
    if space.degree == 1:
        vals = p1_values(quad.TRI_POINTS)
    else:
        vals = p2_values(quad.TRI_POINTS)
    local = np.einsum("q,t,qm,qn->tmn", quad.TRI_WEIGHTS, area, vals, vals)
    dofs = space.tri_dofs
    n_local = dofs.shape[1]
    rows = np.repeat(dofs, n_local, axis=1).ravel()
    cols = np.tile(dofs, (1, n_local)).ravel()
    M = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(space.num_dofs, space.num_dofs)
    ).tocsr()
    free = space.free_dofs
    return M[free][:, free].tocsr()


def poincare_gamma(partition: Partition, base_passes: int = 4, tol: float = 1e-8) -> float:
    """Coercivity factor gamma = lambda_1 / (1 + lambda_1) of the full H1 norm.

    lambda_1 is the first Dirichlet Laplacian eigenvalue of the reference
    domain, found by inverse power iteration on a coarse mesh.
    """
    from .mesh import uniform_mesh

    mesh = uniform_mesh(partition, 1.0, base_passes=base_passes)
    coeffs = transform_coefficients(
        ProblemData(
            diffusion=lambda p: np.broadcast_to(np.eye(2), (len(np.atleast_2d(p)), 2, 2)),
            source=lambda p: np.zeros(len(np.atleast_2d(p))),
            qoi_weight=lambda p: np.zeros(len(np.atleast_2d(p))),
        ),
        identity_maps(partition),
    )
    system = assemble(mesh, coeffs, degree=1)
    K = system.matrix
    M = mass_matrix(system.space)
    lu = spla.splu(K.tocsc())
    rng = np.random.Generator(np.random.Philox(2718))
    u = rng.standard_normal(K.shape[0])
    lam = np.inf
    for _ in range(500):
        u = lu.solve(M @ u)
        u /= np.sqrt(u @ (M @ u))
        lam_new = float((u @ (K @ u)) / (u @ (M @ u)))
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return lam / (1.0 + lam)


def dump_field(field: Field, path):
    with open(path, "w") as fh:
        for i, v in enumerate(field.coefficients):
            fh.write(f"{i} {v:.17g}\n")


def dump_system(system: LinearSystem, path):
    coo = system.matrix.tocoo()
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
