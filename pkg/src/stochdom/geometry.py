"""Reference domain, boundary perturbation sampling, and affine pullbacks.

A polygonal reference domain is partitioned into coarse triangular
subdomains. Each random realization displaces the polygon's boundary
nodes; subdomains touching the boundary deform and are mapped back to
their reference shape by invertible affine maps, while interior
subdomains keep the identity map. Problem data defined on the physical
realization is pulled back through those maps, so no realization is
ever meshed directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .quadrature import TRI_BARY

# Retries for rejection sampling of inadmissible realizations.
DEFAULT_MAX_RETRIES = 100

# |det R| below this is treated as a collapsed (degenerate) triangle.
DEGENERACY_THRESHOLD = 1e-14


class GeometryError(ValueError):
    """Invalid geometric input (non-simple polygon, degenerate triangle...)."""


class SamplingError(RuntimeError):
    """Rejection sampling failed to produce an admissible realization."""

    def __init__(self, message, index, retries):
        super().__init__(message)
        self.index = index
        self.retries = retries


def polygon_area(nodes):
    """Signed area of a polygon (positive for counter-clockwise order)."""
    nodes = np.asarray(nodes, dtype=float)
    x, y = nodes[:, 0], nodes[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _segments_properly_intersect(p1, p2, q1, q2):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def polygon_is_simple(nodes):
    """True if no two non-adjacent edges properly intersect."""
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    for i in range(n):
        a1, a2 = nodes[i], nodes[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = nodes[j], nodes[(j + 1) % n]
            if _segments_properly_intersect(a1, a2, b1, b2):
                return False
    return True


@dataclass(frozen=True)
class ReferenceDomain:
    """Fixed polygonal domain with counter-clockwise boundary nodes."""

    boundary_nodes: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.boundary_nodes, dtype=float))
        object.__setattr__(self, "boundary_nodes", nodes)
        if nodes.ndim != 2 or nodes.shape[1] != 2 or nodes.shape[0] < 3:
            raise GeometryError("boundary_nodes must be (J, 2) with J >= 3")
        if polygon_area(nodes) <= 0:
            raise GeometryError("boundary nodes must be counter-clockwise (positive area)")
        if not polygon_is_simple(nodes):
            raise GeometryError("reference polygon is self-intersecting")

    @property
    def num_boundary_nodes(self):
        return len(self.boundary_nodes)

    @property
    def centroid(self):
        return self.boundary_nodes.mean(axis=0)


def unit_square_domain(nx=4):
    """Unit square with nx equal boundary segments per side (J = 4*nx nodes)."""
    if nx < 1:
        raise GeometryError("nx must be >= 1")
    s = np.arange(nx) / nx
    bottom = np.column_stack([s, np.zeros(nx)])
    right = np.column_stack([np.ones(nx), s])
    top = np.column_stack([1.0 - s, np.ones(nx)])
    left = np.column_stack([np.zeros(nx), 1.0 - s])
    return ReferenceDomain(np.vstack([bottom, right, top, left]))


@dataclass(frozen=True)
class PerturbationModel:
    """Per-node uniform-box displacement distribution with admissibility data.

    half_widths[j] gives the half-width of the uniform box for node j in
    each coordinate; zero half-widths make the node deterministic. When
    det_bounds is set, sampled realizations whose affine maps violate
    |det J| in [m_lower, m_upper] are rejected and redrawn (the partition
    to check against is supplied at sampling time).
    """

    domain: ReferenceDomain
    half_widths: np.ndarray
    det_bounds: Optional[tuple] = None
    envelope_check: bool = False
    max_retries: int = DEFAULT_MAX_RETRIES

    def __post_init__(self):
        hw = np.asarray(self.half_widths, dtype=float)
        if hw.ndim == 0:
            hw = np.full((self.domain.num_boundary_nodes, 2), float(hw))
        if hw.shape != (self.domain.num_boundary_nodes, 2):
            raise GeometryError("half_widths must broadcast to (J, 2)")
        if np.any(hw < 0):
            raise GeometryError("half_widths must be nonnegative")
        object.__setattr__(self, "half_widths", hw)
        if self.det_bounds is not None:
            lo, hi = self.det_bounds
            if not (0 < lo <= hi):
                raise GeometryError("det_bounds must satisfy 0 < lower <= upper")

    def envelope_polygons(self):
        """Inner and outer envelope polygons (scaled about the centroid)."""
        c = self.domain.centroid
        nodes = self.domain.boundary_nodes
        radial = np.linalg.norm(nodes - c, axis=1)
        margin = np.sqrt(2.0) * self.half_widths.max() / radial.min()
        outer = c + (1.0 + margin) * (nodes - c)
        inner = c + max(1.0 - margin, 1e-6) * (nodes - c)
        return inner, outer


@dataclass(frozen=True)
class BoundarySample:
    """One realization of boundary-node displacements."""

    sample_index: int
    displacements: np.ndarray
    perturbed_nodes: np.ndarray
    rejections: int = 0
    envelope_ok: Optional[bool] = None

    @property
    def magnitude(self):
        """max_j of the Euclidean displacement norms."""
        return float(np.linalg.norm(self.displacements, axis=1).max())


@dataclass(frozen=True)
class Partition:
    """Coarse triangular subdivision of the reference domain.

    nodes holds every partition vertex; the first J rows are the domain's
    boundary nodes (in order) so that boundary node j is partition vertex j.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    touches_boundary: np.ndarray
    num_boundary_nodes: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(
            self, "touches_boundary", np.ascontiguousarray(self.touches_boundary, dtype=bool)
        )
        areas = self.areas()
        if np.any(areas <= 0):
            raise GeometryError("partition triangles must be positively oriented")

    @property
    def num_subdomains(self):
        return len(self.triangles)

    def areas(self):
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def adjacency(self):
        """Map d -> set of subdomains sharing an edge with d."""
        edge_owner = {}
        adj = {d: set() for d in range(self.num_subdomains)}
        for d, tri in enumerate(self.triangles):
            for k in range(3):
                edge = tuple(sorted((tri[k], tri[(k + 1) % 3])))
                if edge in edge_owner:
                    other = edge_owner[edge]
                    adj[d].add(other)
                    adj[other].add(d)
                else:
                    edge_owner[edge] = d
        return adj

    def perturbed_nodes(self, sample: BoundarySample):
        """Partition vertex coordinates under a boundary realization."""
        moved = self.nodes.copy()
        moved[: self.num_boundary_nodes] = sample.perturbed_nodes
        return moved

    def locate(self, points):
        """Subdomain index containing each point (-1 if outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tags = np.full(len(points), -1, dtype=np.int64)
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        for i, pt in enumerate(points):
            r = pt[None, :] - p[:, 0]
            s = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det
            t = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det
            inside = (s >= -1e-12) & (t >= -1e-12) & (s + t <= 1 + 1e-12)
            hit = np.flatnonzero(inside)
            if len(hit):
                tags[i] = hit[0]
        return tags


@dataclass(frozen=True)
class LayerSpec:
    """Parameters of the boundary-layer partition construction.

    depth is the inward offset of the deforming layer as a fraction of the
    scaling toward the centroid; the layer must be deep enough that no
    admissible displacement collapses a layer triangle. core selects how
    the fixed interior is triangulated: a structured grid (square domains
    with equally spaced nodes) or a centroid fan.
    """

    depth: float = 0.5
    core: str = "auto"  # auto | grid | fan

    def __post_init__(self):
        if not (0 < self.depth < 1):
            raise GeometryError("layer depth must lie in (0, 1)")
        if self.core not in ("auto", "grid", "fan"):
            raise GeometryError("core must be one of auto|grid|fan")


def _square_grid_layout(nodes):
    """Detect equally spaced nodes on an axis-aligned square; return (corner, side, nx)."""
    x0, y0 = nodes.min(axis=0)
    x1, y1 = nodes.max(axis=0)
    side = x1 - x0
    if abs((y1 - y0) - side) > 1e-12 * max(1.0, side):
        return None
    J = len(nodes)
    if J % 4:
        return None
    nx = J // 4
    expected = unit_square_domain(nx).boundary_nodes * side + np.array([x0, y0])
    # allow any cyclic shift of the same CCW ordering
    for shift in range(J):
        if np.allclose(np.roll(nodes, -shift, axis=0), expected, atol=1e-12 * max(1.0, side)):
            return (np.array([x0, y0]), side, nx, shift)
    return None


def build_partition(reference: ReferenceDomain, layer_spec: LayerSpec = LayerSpec()) -> Partition:
    """Partition the domain into a deforming boundary layer and a fixed core.

    Every boundary node is a partition vertex. The layer consists of two
    triangles per boundary segment between the polygon and an inner copy
    scaled about the centroid; the core is either a structured grid (when
    the inner polygon is a square with uniform nodes) or a centroid fan.
    """
    outer = reference.boundary_nodes
    J = len(outer)
    c = reference.centroid
    inner = c + (1.0 - layer_spec.depth) * (outer - c)

    nodes = [outer, inner]
    inner_ids = np.arange(J, 2 * J)
    triangles = []
    for j in range(J):
        jn = (j + 1) % J
        triangles.append((j, jn, inner_ids[j]))
        triangles.append((jn, inner_ids[jn], inner_ids[j]))

    layout = None
    if layer_spec.core in ("auto", "grid"):
        layout = _square_grid_layout(inner)
        if layout is None and layer_spec.core == "grid":
            raise GeometryError("grid core requires a uniform axis-aligned square inner polygon")

    if layout is not None:
        corner, side, nx, shift = layout
        h = side / nx
        grid_id = {}
        extra = []
        next_id = 2 * J
        square = unit_square_domain(nx).boundary_nodes

        def node_id(i, k):
            nonlocal next_id
            pt = corner + np.array([i, k]) * h
            # reuse inner-ring vertices for perimeter grid points
            rel = (pt - corner) / side
            d2 = np.sum((square - rel) ** 2, axis=1)
            jmin = int(np.argmin(d2))
            if d2[jmin] < 1e-24:
                return inner_ids[(jmin + shift) % J]
            key = (i, k)
            if key not in grid_id:
                grid_id[key] = next_id
                extra.append(pt)
                next_id += 1
            return grid_id[key]

        for i in range(nx):
            for k in range(nx):
                n00 = node_id(i, k)
                n10 = node_id(i + 1, k)
                n01 = node_id(i, k + 1)
                n11 = node_id(i + 1, k + 1)
                triangles.append((n00, n10, n11))
                triangles.append((n00, n11, n01))
        if extra:
            nodes.append(np.asarray(extra))
    else:
        centroid_id = 2 * J
        nodes.append(c[None, :])
        for j in range(J):
            jn = (j + 1) % J
            triangles.append((inner_ids[j], inner_ids[jn], centroid_id))

    all_nodes = np.vstack(nodes)
    tris = np.asarray(triangles, dtype=np.int64)
    touches = np.array([bool(np.any(t < J)) for t in tris])
    part = Partition(all_nodes, tris, touches, J)
    if abs(part.areas().sum() - polygon_area(outer)) > 1e-10 * abs(polygon_area(outer)):
        raise GeometryError("partition does not cover the domain")
    return part


@dataclass(frozen=True)
class AffineMapSet:
    """Per-subdomain affine maps x -> J (x - r1) + s1 from a realization to the reference.

    r1 anchors the perturbed triangle, s1 the reference triangle. Interior
    subdomains carry the identity.
    """

    sample_index: int
    jac: np.ndarray  # (D, 2, 2)
    jac_inv: np.ndarray  # (D, 2, 2)
    det: np.ndarray  # (D,)
    anchor_perturbed: np.ndarray  # (D, 2) r_{d,1}
    anchor_reference: np.ndarray  # (D, 2) s_{d,1}

    @property
    def num_subdomains(self):
        return len(self.det)

    def forward(self, points, tags):
        """phi_d(x): map physical points to the reference domain."""
        points = np.asarray(points, dtype=float)
        d = points - self.anchor_perturbed[tags]
        return np.einsum("nij,nj->ni", self.jac[tags], d) + self.anchor_reference[tags]

    def pull_back(self, points, tags):
        """phi_d^{-1}(y): map reference points to the physical realization."""
        points = np.asarray(points, dtype=float)
        d = points - self.anchor_reference[tags]
        return np.einsum("nij,nj->ni", self.jac_inv[tags], d) + self.anchor_perturbed[tags]

    def operator_norms(self):
        """Spectral norms of J_d and J_d^{-1} per subdomain."""
        nj = np.linalg.norm(self.jac, ord=2, axis=(1, 2))
        ninv = np.linalg.norm(self.jac_inv, ord=2, axis=(1, 2))
        return nj, ninv


def identity_maps(partition: Partition, sample_index=0) -> AffineMapSet:
    D = partition.num_subdomains
    eye = np.broadcast_to(np.eye(2), (D, 2, 2)).copy()
    anchors = partition.nodes[partition.triangles[:, 0]]
    return AffineMapSet(sample_index, eye, eye.copy(), np.ones(D), anchors.copy(), anchors.copy())


def affine_maps(partition: Partition, sample: BoundarySample) -> AffineMapSet:
    """Vertex-matching affine maps for one boundary realization.

    For each deforming subdomain, J_d = S_d R_d^{-1} built from the vertex
    difference matrices, so the map sends perturbed vertices exactly onto
    reference vertices. Adjacent maps agree along shared edges because they
    agree at both endpoints.
    """
    ref = partition.nodes[partition.triangles]  # (D, 3, 2)
    moved = partition.perturbed_nodes(sample)[partition.triangles]

    D = partition.num_subdomains
    jac = np.broadcast_to(np.eye(2), (D, 2, 2)).copy()
    det = np.ones(D)

    deform = partition.touches_boundary
    S = np.stack([ref[deform, 1] - ref[deform, 0], ref[deform, 2] - ref[deform, 0]], axis=-1)
    R = np.stack([moved[deform, 1] - moved[deform, 0], moved[deform, 2] - moved[deform, 0]], axis=-1)
    detR = R[:, 0, 0] * R[:, 1, 1] - R[:, 0, 1] * R[:, 1, 0]
    # signed: a flipped subdomain makes the perturbed pieces overlap
    bad = detR < DEGENERACY_THRESHOLD
    if np.any(bad):
        d_bad = np.flatnonzero(deform)[np.argmax(bad)]
        raise GeometryError(
            f"degenerate perturbed subdomain d={d_bad} in sample {sample.sample_index}"
        )
    Rinv = np.empty_like(R)
    Rinv[:, 0, 0] = R[:, 1, 1] / detR
    Rinv[:, 0, 1] = -R[:, 0, 1] / detR
    Rinv[:, 1, 0] = -R[:, 1, 0] / detR
    Rinv[:, 1, 1] = R[:, 0, 0] / detR
    jac[deform] = np.einsum("nij,njk->nik", S, Rinv)
    det[deform] = (jac[deform, 0, 0] * jac[deform, 1, 1]
                   - jac[deform, 0, 1] * jac[deform, 1, 0])

    jac_inv = np.empty_like(jac)
    jac_inv[:, 0, 0] = jac[:, 1, 1] / det
    jac_inv[:, 0, 1] = -jac[:, 0, 1] / det
    jac_inv[:, 1, 0] = -jac[:, 1, 0] / det
    jac_inv[:, 1, 1] = jac[:, 0, 0] / det

    return AffineMapSet(
        sample.sample_index, jac, jac_inv, det,
        anchor_perturbed=moved[:, 0].copy(), anchor_reference=ref[:, 0].copy(),
    )


@dataclass(frozen=True)
class JacobianReport:
    """Determinant and operator-norm bounds of a map set against [M_*, M^*]."""

    det_min: float
    det_max: float
    m_lower: float
    m_upper: float
    passed: bool
    violating: np.ndarray
    norm_jac_max: float
    norm_inv_max: float


def validate_jacobians(maps: AffineMapSet, m_lower: float, m_upper: float) -> JacobianReport:
    if not (0 < m_lower <= m_upper):
        raise GeometryError("need 0 < m_lower <= m_upper")
    adet = np.abs(maps.det)
    violating = np.flatnonzero((adet < m_lower) | (adet > m_upper))
    nj, ninv = maps.operator_norms()
    return JacobianReport(
        det_min=float(adet.min()),
        det_max=float(adet.max()),
        m_lower=m_lower,
        m_upper=m_upper,
        passed=violating.size == 0,
        violating=violating,
        norm_jac_max=float(nj.max()),
        norm_inv_max=float(ninv.max()),
    )


def _draw_displacements(model: PerturbationModel, master_seed, index, attempt):
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index), int(attempt)))
    rng = np.random.Generator(np.random.Philox(seq))
    u = rng.uniform(-1.0, 1.0, size=model.half_widths.shape)
    return u * model.half_widths


def _point_in_polygon(point, nodes):
    x, y = point
    inside = False
    n = len(nodes)
    for i in range(n):
        x1, y1 = nodes[i]
        x2, y2 = nodes[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xs = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xs:
                inside = not inside
    return inside


def sample_perturbation(
    model: PerturbationModel,
    master_seed: int,
    index: int,
    partition: Optional[Partition] = None,
) -> BoundarySample:
    """Draw the boundary realization for (master_seed, index).

    The draw is a pure function of (master_seed, index): each retry uses a
    dedicated counter-based substream, so results are identical under any
    calling order. Realizations producing a non-simple polygon, or (when a
    partition and det bounds are configured) inadmissible Jacobians, are
    rejected and redrawn.
    """
    if index < 1:
        raise GeometryError("sample index must be >= 1")
    check_dets = model.det_bounds is not None and partition is not None
    for attempt in range(model.max_retries + 1):
        disp = _draw_displacements(model, master_seed, index, attempt)
        nodes = model.domain.boundary_nodes + disp
        if polygon_area(nodes) <= 0 or not polygon_is_simple(nodes):
            continue
        sample = BoundarySample(index, disp, nodes, rejections=attempt)
        if check_dets:
            try:
                maps = affine_maps(partition, sample)
            except GeometryError:
                continue
            report = validate_jacobians(maps, *model.det_bounds)
            if not report.passed:
                continue
        if model.envelope_check:
            inner, outer = model.envelope_polygons()
            ok = all(_point_in_polygon(p, outer) for p in nodes) and all(
                _point_in_polygon(p, nodes) for p in inner
            )
            sample = BoundarySample(index, disp, nodes, rejections=attempt, envelope_ok=ok)
        return sample
    raise SamplingError(
        f"no admissible realization for sample {index} after {model.max_retries} retries",
        index=index,
        retries=model.max_retries,
    )


@dataclass(frozen=True)
class ProblemData:
    """Coefficients of the physical problem, evaluable on the outer envelope.

    diffusion maps (n, 2) points to (n, 2, 2) SPD matrices, source and
    qoi_weight map points to scalars, convection (optional) to (n, 2)
    vectors. Indicator factors belong inside qoi_weight.
    """

    diffusion: Callable
    source: Callable
    qoi_weight: Callable
    convection: Optional[Callable] = None

    @property
    def has_convection(self):
        return self.convection is not None


def constant_diffusion(value=1.0):
    mat = np.asarray(value, dtype=float)
    if mat.ndim == 0:
        mat = float(mat) * np.eye(2)

    def a(points):
        points = np.atleast_2d(points)
        return np.broadcast_to(mat, (len(points), 2, 2)).copy()

    return a


def constant_vector(vx, vy):
    vec = np.array([vx, vy], dtype=float)

    def b(points):
        points = np.atleast_2d(points)
        return np.broadcast_to(vec, (len(points), 2)).copy()

    return b


@dataclass(frozen=True)
class TransformedCoefficients:
    """Pulled-back data A, F, b-hat, psi-tilde on the reference domain.

    Evaluators take reference points with their subdomain tags and apply
    the pointwise inverse maps; the physical realization is never meshed.
    """

    data: ProblemData
    maps: AffineMapSet

    def _check(self, tags):
        tags = np.asarray(tags)
        if np.any(tags < 0) or np.any(tags >= self.maps.num_subdomains):
            raise GeometryError("evaluation point outside the subdomain union")
        return tags

    def physical_points(self, points, tags):
        return self.maps.pull_back(np.atleast_2d(points), self._check(tags))

    def diffusion(self, points, tags):
        tags = self._check(tags)
        x = self.maps.pull_back(np.atleast_2d(points), tags)
        a = self.data.diffusion(x)
        J = self.maps.jac[tags]
        scale = 1.0 / np.abs(self.maps.det[tags])
        return scale[:, None, None] * np.einsum("nij,njk,nlk->nil", J, a, J)

    def source(self, points, tags):
        tags = self._check(tags)
        x = self.maps.pull_back(np.atleast_2d(points), tags)
        return self.data.source(x) / np.abs(self.maps.det[tags])

    def convection(self, points, tags):
        if self.data.convection is None:
            return None
        tags = self._check(tags)
        x = self.maps.pull_back(np.atleast_2d(points), tags)
        b = self.data.convection(x)
        scale = 1.0 / np.abs(self.maps.det[tags])
        return scale[:, None] * np.einsum("nij,nj->ni", self.maps.jac[tags], b)

    def qoi_weight(self, points, tags):
        tags = self._check(tags)
        x = self.maps.pull_back(np.atleast_2d(points), tags)
        return self.data.qoi_weight(x) / np.abs(self.maps.det[tags])

    @property
    def has_convection(self):
        return self.data.has_convection


def transform_coefficients(data: ProblemData, maps: AffineMapSet) -> TransformedCoefficients:
    return TransformedCoefficients(data, maps)


def _triangle_diam_inball(p):
    """(diameter, inscribed-ball diameter) for triangles stacked in (n, 3, 2)."""
    a = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    kappa = np.maximum(a, np.maximum(b, c))
    s = 0.5 * (a + b + c)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    rho = 2.0 * area / s
    return kappa, rho


@dataclass(frozen=True)
class ShapeReport:
    """Subdomain shape diagnostics and the induced stability constants."""

    kappa: np.ndarray
    rho: np.ndarray
    kappa_perturbed: np.ndarray
    rho_perturbed: np.ndarray
    max_aspect_perturbed: float
    continuity: float  # C_{1,n}
    coercivity: float  # C_{2,n}
    gamma: float
    a_min: float
    a_max: float
    h1_amplification: float


def shape_report(
    partition: Partition, sample: BoundarySample, data: ProblemData, gamma: float
) -> ShapeReport:
    """Continuity/coercivity constants of the transformed bilinear form.

    kappa is the triangle diameter and rho the inscribed-ball diameter
    2*area/semiperimeter; the amplification factor bounds how much the
    transformation can inflate the best-approximation error in H1.
    """
    ref = partition.nodes[partition.triangles]
    moved = partition.perturbed_nodes(sample)[partition.triangles]
    kappa, rho = _triangle_diam_inball(ref)
    kappa_p, rho_p = _triangle_diam_inball(moved)
    if np.any(rho <= 0) or np.any(rho_p <= 0):
        raise GeometryError("degenerate subdomain triangle in shape report")

    pts = np.einsum("qk,nkd->nqd", TRI_BARY, ref).reshape(-1, 2)
    a_vals = data.diffusion(pts)
    eigs = np.linalg.eigvalsh(a_vals)
    a_min = float(eigs[:, 0].min())
    a_max = float(eigs[:, -1].max())

    ratio = (kappa * kappa_p) / (rho * rho_p)
    c1 = a_max * float(np.max(ratio) ** 2)
    c2 = gamma * a_min * float(np.min(1.0 / ratio) ** 2)
    amp = np.sqrt(a_max / (gamma * a_min)) * float(np.max(ratio) ** 2)
    return ShapeReport(
        kappa=kappa,
        rho=rho,
        kappa_perturbed=kappa_p,
        rho_perturbed=rho_p,
        max_aspect_perturbed=float(np.max(kappa_p / rho_p)),
        continuity=c1,
        coercivity=c2,
        gamma=gamma,
        a_min=a_min,
        a_max=a_max,
        h1_amplification=amp,
    )
