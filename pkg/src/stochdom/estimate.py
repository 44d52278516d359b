"""Adjoint-weighted a posteriori error estimates for the QoI.

The generalized Green's function is approximated with P2 elements on the
primal mesh and weights the residual of the P1 solution; summed element
contributions reproduce the global estimate exactly, and their absolute
values drive adaptive marking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import quadrature as quad
from .fem import (
    AssemblyError,
    Field,
    QoIValue,
    _element_geometry,
    assemble,
    qoi,
    solve,
)
from .geometry import (
    BoundarySample,
    Partition,
    ProblemData,
    TransformedCoefficients,
    affine_maps,
    transform_coefficients,
)
from .mesh import IndicatorField, TriMesh, refine_all

# Reference errors smaller than this give an undefined effectivity.
EFFECTIVITY_FLOOR = 1e-14


@dataclass(frozen=True)
class AdjointField:
    """P2 approximation of the adjoint solution for a given QoI weight."""

    field: Field
    coeffs: TransformedCoefficients

    def __post_init__(self):
        if self.field.space.degree != 2:
            raise AssemblyError("adjoint fields are discretized with P2 elements")


@dataclass(frozen=True)
class ErrorEstimate:
    """Estimated QoI error for one sample solve."""

    total: float
    sample_index: int = 0
    reference_error: Optional[float] = None
    effectivity: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.total):
            raise AssemblyError("error estimate is not finite")

    def __float__(self):
        return float(self.total)


def solve_adjoint(
    mesh: TriMesh,
    coeffs: TransformedCoefficients,
    convection: bool = False,
    tol: float = 1e-10,
) -> AdjointField:
    """Weak adjoint with the transformed QoI weight as volume source.

    Convection lands on the test-function gradient (transposed operator);
    boundary data is homogeneous Dirichlet.
    """
    system = assemble(mesh, coeffs, degree=2, convection=convection, adjoint=True)
    field = solve(system, tol=tol)
    return AdjointField(field, coeffs)


def _element_contributions(
    primal: Field,
    adjoint: AdjointField,
    coeffs: TransformedCoefficients,
    convection: bool,
):
    """Signed per-element residual contributions weighted by the adjoint."""
    mesh = primal.space.mesh
    if adjoint.field.space.mesh.num_vertices != mesh.num_vertices:
        raise AssemblyError("primal and adjoint live on different meshes")
    det, _, points = _element_geometry(mesh)
    area = 0.5 * np.abs(det)
    Q = points.shape[1]
    flat = points.reshape(-1, 2)
    tags = np.repeat(mesh.tags, Q)

    f = coeffs.source(flat, tags).reshape(points.shape[:2])
    a = coeffs.diffusion(flat, tags).reshape(points.shape[0], Q, 2, 2)
    eta = adjoint.field.element_values(quad.TRI_POINTS)
    grad_eta = adjoint.field.element_gradients(quad.TRI_POINTS)
    grad_u = primal.element_gradients(quad.TRI_POINTS)

    w = quad.TRI_WEIGHTS
    contrib = np.einsum("q,t,tq,tq->t", w, area, f, eta)
    agrad = np.einsum("tqij,tqj->tqi", a, grad_u)
    contrib -= np.einsum("q,t,tqi,tqi->t", w, area, agrad, grad_eta)
    if convection:
        b = coeffs.convection(flat, tags).reshape(points.shape[0], Q, 2)
        bgrad = np.einsum("tqi,tqi->tq", b, grad_u)
        contrib -= np.einsum("q,t,tq,tq->t", w, area, bgrad, eta)
    return contrib


def error_estimate(
    primal: Field,
    adjoint: AdjointField,
    coeffs: TransformedCoefficients,
    convection: bool = False,
) -> ErrorEstimate:
    """QoI error representation: load residual weighted by the adjoint."""
    contrib = _element_contributions(primal, adjoint, coeffs, convection)
    return ErrorEstimate(float(contrib.sum()), coeffs.maps.sample_index)


def element_indicators(
    primal: Field,
    adjoint: AdjointField,
    coeffs: TransformedCoefficients,
    convection: bool,
    mesh: TriMesh,
) -> IndicatorField:
    if mesh.num_triangles != primal.space.mesh.num_triangles:
        raise AssemblyError("mesh does not match the primal field")
    contrib = _element_contributions(primal, adjoint, coeffs, convection)
    return IndicatorField(np.abs(contrib), contrib)


def effectivity(
    estimate: ErrorEstimate, reference_qoi: QoIValue, computed_qoi: QoIValue
) -> Optional[float]:
    """Ratio of the estimate to the reference error; None when undefined."""
    true_err = float(reference_qoi) - float(computed_qoi)
    if abs(true_err) < EFFECTIVITY_FLOOR:
        return None
    return float(estimate) / true_err


def reference_qoi(
    sample: BoundarySample,
    partition: Partition,
    data: ProblemData,
    mesh: TriMesh,
    sweeps: int = 2,
    tol: float = 1e-10,
) -> QoIValue:
    """Reference QoI: P2 elements on a uniformly refined companion mesh."""
    fine = refine_all(mesh, 2 * sweeps)
    maps = affine_maps(partition, sample)
    coeffs = transform_coefficients(data, maps)
    system = assemble(fine, coeffs, degree=2, convection=data.has_convection)
    field = solve(system, tol=tol)
    return qoi(field, coeffs, fine)


def dump_indicators(indicators: IndicatorField, path):
    with open(path, "w") as fh:
        for i, (e, s) in enumerate(zip(indicators.values, indicators.signed)):
            fh.write(f"{i} {e:.17g} {s:.17g}\n")
