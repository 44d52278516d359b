"""Conforming triangulations refining the subdomain partition.

Triangles are stored so that the refinement edge is (t[0], t[1]) and the
newest vertex is t[2]; refinement is newest-vertex bisection with
conforming closure, so meshes produced here never contain hanging nodes.
Uniform refinement performs two mark-all bisection passes per sweep,
which reproduces red refinement exactly on structured right-triangle
grids and quarters h in general.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import Partition


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class RefinementError(RuntimeError):
    """Conforming closure failed to terminate (corrupted mesh)."""


@dataclass(frozen=True)
class TriMesh:
    """Conforming triangulation with per-triangle subdomain tags.

    vertices : (V, 2) float
    triangles : (T, 3) int, CCW, refinement edge (t0, t1), newest vertex t2
    tags : (T,) int subdomain index of each triangle
    generation : (T,) int bisection depth since the base mesh
    """

    vertices: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray
    generation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "tags", np.ascontiguousarray(self.tags, dtype=np.int64))
        object.__setattr__(self, "generation", np.ascontiguousarray(self.generation, dtype=np.int64))
        if np.any(self.signed_areas() <= 0):
            raise MeshError("all triangles must be positively oriented with area > 0")

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    def corners(self):
        return self.vertices[self.triangles]

    def signed_areas(self):
        p = self.corners()
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def _edge_data(self):
        t = self.triangles
        raw = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges, inverse = np.unique(np.sort(raw, axis=1), axis=0, return_inverse=True)
        tri_to_edge = inverse.reshape(3, self.num_triangles).T
        counts = np.bincount(inverse, minlength=len(edges))
        # adjacent triangles per edge (-1 when absent)
        adj = np.full((len(edges), 2), -1, dtype=np.int64)
        tri_ids = np.tile(np.arange(self.num_triangles), 3)
        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        sorted_tris = tri_ids[order]
        if np.any(counts > 2):
            bad = int(np.argmax(counts > 2))
            raise MeshError(f"edge {tuple(edges[bad])} shared by more than two triangles")
        first = np.searchsorted(sorted_edges, np.arange(len(edges)), side="left")
        adj[:, 0] = sorted_tris[first]
        two = counts == 2
        adj[two, 1] = sorted_tris[first[two] + 1]
        return edges, tri_to_edge, counts, adj

    @property
    def edges(self):
        """Unique edges as sorted vertex pairs, shape (E, 2)."""
        return self._edge_data[0]

    @property
    def tri_to_edge(self):
        """Per-triangle edge ids in order (e01, e12, e20)."""
        return self._edge_data[1]

    @property
    def edge_tri(self):
        """Adjacent triangle ids per edge (second entry -1 on the boundary)."""
        return self._edge_data[3]

    @cached_property
    def boundary_edge_ids(self):
        """Indices into edges of the boundary edges."""
        _, _, counts, _ = self._edge_data
        return np.flatnonzero(counts == 1)

    @cached_property
    def boundary_edges(self):
        """(B, 2) vertex pairs of boundary edges (all Dirichlet here)."""
        return self.edges[self.boundary_edge_ids]

    @cached_property
    def boundary_vertices(self):
        be = self.boundary_edges
        return np.unique(be)

    @cached_property
    def interface_edges(self):
        """(I, 2) vertex pairs and (I, 2) subdomain tags of subdomain interfaces."""
        edges, _, counts, adj = self._edge_data
        interior = counts == 2
        t0 = self.tags[adj[interior, 0]]
        t1 = self.tags[adj[interior, 1]]
        mask = t0 != t1
        return edges[interior][mask], np.column_stack([t0[mask], t1[mask]])

    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def h_max(self):
        return float(self.edge_lengths().max())


def _rotate_longest_first(vertices, triangles):
    """Cyclically reorder so the longest edge is (t0, t1); keeps orientation."""
    tris = triangles.copy()
    p = vertices[tris]
    l01 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    l12 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    l20 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    longest = np.argmax(np.column_stack([l01, l12, l20]), axis=1)
    tris[longest == 1] = tris[longest == 1][:, [1, 2, 0]]
    tris[longest == 2] = tris[longest == 2][:, [2, 0, 1]]
    return tris


def base_mesh(partition: Partition) -> TriMesh:
    """The partition itself as a mesh; triangle d carries tag d."""
    tris = _rotate_longest_first(partition.nodes, partition.triangles)
    D = partition.num_subdomains
    return TriMesh(
        partition.nodes.copy(), tris, np.arange(D), np.zeros(D, dtype=np.int64)
    )


@dataclass(frozen=True)
class MarkSet:
    """Triangle indices selected for refinement."""

    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "indices", np.unique(np.asarray(self.indices, dtype=np.int64))
        )

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class IndicatorField:
    """Per-element nonnegative indicators with their signed contributions."""

    values: np.ndarray
    signed: np.ndarray = None

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float)
        if np.any(values < 0):
            raise MeshError("indicators must be nonnegative")
        object.__setattr__(self, "values", values)
        if self.signed is None:
            object.__setattr__(self, "signed", values.copy())
        else:
            object.__setattr__(self, "signed", np.ascontiguousarray(self.signed, dtype=float))

    @property
    def total(self):
        return float(self.values.sum())


def refine(mesh: TriMesh, marks: MarkSet, max_closure_iters: int = None) -> TriMesh:
    """Bisect marked triangles plus conforming closure.

    Marked triangles contribute their refinement edge to a marked-edge set;
    closure iterates the rule "any marked edge forces the refinement edge"
    to a fixpoint, after which every triangle bisects exactly its marked
    edges (1 to 3 splits) and both sides of a marked edge agree on the new
    midpoint. Never coarsens.
    """
    if len(marks) == 0:
        return mesh
    if np.any(marks.indices < 0) or np.any(marks.indices >= mesh.num_triangles):
        raise MeshError("mark set references triangles outside the mesh")

    edges = mesh.edges
    tri_to_edge = mesh.tri_to_edge
    n_edges = len(edges)
    marked = np.zeros(n_edges, dtype=bool)
    marked[tri_to_edge[marks.indices, 0]] = True

    cap = max_closure_iters if max_closure_iters is not None else n_edges + 2
    for it in range(cap + 1):
        if it == cap:
            raise RefinementError("conforming closure did not terminate")
        tri_hit = marked[tri_to_edge].any(axis=1)
        need = tri_hit & ~marked[tri_to_edge[:, 0]]
        if not need.any():
            break
        marked[tri_to_edge[need, 0]] = True

    # midpoint vertices for marked edges
    new_ids = np.full(n_edges, -1, dtype=np.int64)
    marked_ids = np.flatnonzero(marked)
    new_ids[marked_ids] = mesh.num_vertices + np.arange(len(marked_ids))
    midpoints = 0.5 * (
        mesh.vertices[edges[marked_ids, 0]] + mesh.vertices[edges[marked_ids, 1]]
    )
    vertices = np.vstack([mesh.vertices, midpoints])

    edge_lookup = {}
    for k, e in enumerate(marked_ids):
        edge_lookup[(edges[e, 0], edges[e, 1])] = new_ids[e]

    def midpoint_of(a, b):
        key = (a, b) if a < b else (b, a)
        return edge_lookup.get(key, -1)

    out_tris = []
    out_tags = []
    out_gen = []

    def emit(a, b, c, tag, gen):
        m = midpoint_of(a, b)
        if m < 0:
            out_tris.append((a, b, c))
            out_tags.append(tag)
            out_gen.append(gen)
        else:
            emit(c, a, m, tag, gen + 1)
            emit(b, c, m, tag, gen + 1)

    for t in range(mesh.num_triangles):
        a, b, c = mesh.triangles[t]
        emit(a, b, c, mesh.tags[t], mesh.generation[t])

    return TriMesh(
        vertices,
        np.asarray(out_tris, dtype=np.int64),
        np.asarray(out_tags, dtype=np.int64),
        np.asarray(out_gen, dtype=np.int64),
    )


def refine_all(mesh: TriMesh, passes: int = 1) -> TriMesh:
    for _ in range(passes):
        mesh = refine(mesh, MarkSet(np.arange(mesh.num_triangles)))
    return mesh


def uniform_mesh(partition: Partition, h_tilde: float, base_passes: int = 0) -> TriMesh:
    """Mesh refining the partition at normalized mesh size h_tilde.

    h_tilde = 1 is the coarsest level (the partition plus base_passes
    bisection passes); each halving of h_tilde applies one uniform sweep
    (two mark-all bisection passes). h_tilde values that are not powers of
    1/2 are rounded down with a warning.
    """
    if not (0 < h_tilde <= 1):
        raise MeshError("h_tilde must lie in (0, 1]")
    k_exact = np.log2(1.0 / h_tilde)
    k = int(np.ceil(k_exact - 1e-12))
    if abs(k_exact - round(k_exact)) > 1e-12:
        warnings.warn(
            f"h_tilde={h_tilde} is not a power of 1/2; using h_tilde={0.5 ** k}",
            stacklevel=2,
        )
    mesh = base_mesh(partition)
    return refine_all(mesh, base_passes + 2 * k)


def interior_angles(mesh: TriMesh):
    """Interior angles in degrees, shape (T, 3)."""
    p = mesh.corners()
    angles = np.empty((mesh.num_triangles, 3))
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.einsum("ni,ni->n", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        angles[:, k] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return angles


def max_angle(mesh: TriMesh) -> float:
    """Largest interior angle over all triangles, in degrees."""
    return float(interior_angles(mesh).max())


def dorfler_mark(indicators: IndicatorField, fraction: float) -> MarkSet:
    """Smallest prefix of descending indicators reaching fraction * total.

    Ties are broken by ascending triangle index; an all-zero field yields
    an empty mark set.
    """
    if not (0 < fraction <= 1):
        raise MeshError("fraction must lie in (0, 1]")
    values = indicators.values
    total = values.sum()
    if total <= 0:
        return MarkSet(np.empty(0, dtype=np.int64))
    order = np.lexsort((np.arange(len(values)), -values))
    csum = np.cumsum(values[order])
    count = int(np.searchsorted(csum, fraction * total - 1e-15 * total)) + 1
    return MarkSet(order[:count])


def write_mesh(mesh: TriMesh, path):
    """ASCII mesh format: header `V T E`, vertex, triangle, and edge lines."""
    iface, _ = mesh.interface_edges
    bnd = mesh.boundary_edges
    lines = [f"{mesh.num_vertices} {mesh.num_triangles} {len(bnd) + len(iface)}"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    for (i, j, k), d in zip(mesh.triangles, mesh.tags):
        lines.append(f"{i} {j} {k} {d}")
    for i, j in bnd:
        lines.append(f"{i} {j} 1")
    for i, j in iface:
        lines.append(f"{i} {j} 2")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    with open(path) as fh:
        tokens = fh.read().split()
    it = iter(tokens)
    V, T, E = int(next(it)), int(next(it)), int(next(it))
    vertices = np.array([[float(next(it)), float(next(it))] for _ in range(V)])
    tris = np.empty((T, 3), dtype=np.int64)
    tags = np.empty(T, dtype=np.int64)
    for t in range(T):
        tris[t] = [int(next(it)), int(next(it)), int(next(it))]
        tags[t] = int(next(it))
    mesh = TriMesh(vertices, tris, tags, np.zeros(T, dtype=np.int64))
    stored = set()
    for _ in range(E):
        i, j, flag = int(next(it)), int(next(it)), int(next(it))
        stored.add((min(i, j), max(i, j), flag))
    iface, _ = mesh.interface_edges
    derived = {(min(i, j), max(i, j), 1) for i, j in mesh.boundary_edges}
    derived |= {(min(i, j), max(i, j), 2) for i, j in iface}
    if stored != derived:
        raise MeshError("edge records inconsistent with triangle connectivity")
    return mesh
