"""Triangulated disk meshes with boundary electrodes.

The generator lays out concentric vertex rings inside a circular tank plus
an electrode-aware boundary ring, then triangulates adjacent rings by
merging their angular orders. Angular positions are exact rationals in
units of full turns, so construction is bit-deterministic. Ring sizes are
forced to multiples of the electrode count p, which makes every generated
mesh invariant under rotation by one electrode pitch; symmetry checks on
the forward model rely on this.

Boundary edges are never stored on disk. They are recovered canonically:
each boundary edge is directed as it appears in its unique triangle (so the
chain runs counterclockwise), and the chain starts at the lowest-indexed
boundary vertex. Electrode arcs are index runs into that chain.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import MeshError

MESH_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conformal triangulation of a disk with p electrode arcs.

    Attributes
    ----------
    vertices : ndarray, shape (n, 2)
        Vertex coordinates in meters.
    triangles : ndarray, shape (nt, 3)
        Vertex index triples, counterclockwise.
    boundary_edges : ndarray, shape (nb, 2)
        Directed boundary edges (a, b) forming one closed
        counterclockwise loop in canonical order.
    electrodes : tuple of ndarray
        Per electrode, the indices into ``boundary_edges`` of its arc.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    electrodes: tuple
    version: int = MESH_FORMAT_VERSION

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def p(self) -> int:
        return len(self.electrodes)

    def boundary_edge_lengths(self) -> np.ndarray:
        a = self.vertices[self.boundary_edges[:, 0]]
        b = self.vertices[self.boundary_edges[:, 1]]
        return np.linalg.norm(b - a, axis=1)

    def electrode_lengths(self) -> np.ndarray:
        """Polyline length of each electrode arc."""
        edge_len = self.boundary_edge_lengths()
        return np.array([edge_len[idx].sum() for idx in self.electrodes])

    def electrode_vertex_ids(self, j: int) -> np.ndarray:
        """Vertex ids along arc j, in chain order (shared endpoints included)."""
        edges = self.boundary_edges[self.electrodes[j]]
        return np.concatenate([edges[:, 0], edges[-1:, 1]])

    def electrode_center(self, j: int) -> np.ndarray:
        """Point at half the arclength of electrode j's polyline."""
        pts = self.vertices[self.electrode_vertex_ids(j)]
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        half = cum[-1] / 2.0
        k = int(np.searchsorted(cum, half, side="right") - 1)
        k = min(k, len(seg) - 1)
        t = (half - cum[k]) / seg[k]
        return pts[k] + t * (pts[k + 1] - pts[k])


@dataclass(frozen=True, eq=False)
class VertexAdjacency:
    """Weighted vertex neighborhoods of a mesh, in CSR layout.

    Neighbor lists are ascending by vertex index; ``weights`` holds the
    inverse Euclidean edge lengths, matched entry for entry.
    """

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    mesh_digest: str

    @property
    def n(self) -> int:
        return self.indptr.size - 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def weight_list(self, i: int) -> np.ndarray:
        return self.weights[self.indptr[i]:self.indptr[i + 1]]

    def edge_pairs(self) -> np.ndarray:
        """Unordered adjacent pairs (i, k) with i < k, one row per edge."""
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        keep = rows < self.indices
        return np.column_stack([rows[keep], self.indices[keep]])


def _signed_area2(v, tri):
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _boundary_chain(triangles: np.ndarray, n_vertices: int) -> np.ndarray:
    """Recover the canonical boundary loop from CCW triangles."""
    seen = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            seen.setdefault(key, []).append((int(a), int(b)))
    succ = {}
    for key, occurrences in seen.items():
        if len(occurrences) > 2:
            raise MeshError(f"edge {key} shared by {len(occurrences)} triangles")
        if len(occurrences) == 1:
            a, b = occurrences[0]
            if a in succ:
                raise MeshError(f"boundary branches at vertex {a}")
            succ[a] = b
    if not succ:
        raise MeshError("mesh has no boundary")
    start = min(succ)
    chain = [start]
    cur = succ[start]
    while cur != start:
        chain.append(cur)
        cur = succ.get(cur)
        if cur is None or len(chain) > len(succ):
            raise MeshError("boundary is not a single closed loop")
    if len(chain) != len(succ):
        raise MeshError("boundary has more than one loop")
    nxt = chain[1:] + chain[:1]
    return np.column_stack([np.array(chain, dtype=np.int64), np.array(nxt, dtype=np.int64)])


def validate_mesh(mesh: Mesh) -> None:
    """Check every structural invariant; raise MeshError on the first failure."""
    v, tri = mesh.vertices, mesh.triangles
    if v.ndim != 2 or v.shape[1] != 2:
        raise MeshError("vertices must be an (n, 2) array")
    if tri.ndim != 2 or tri.shape[1] != 3:
        raise MeshError("triangles must be an (nt, 3) array")
    if tri.min(initial=0) < 0 or tri.max(initial=-1) >= len(v):
        raise MeshError("triangle vertex index out of range")
    area2 = _signed_area2(v, tri)
    scale = float(np.abs(v).max()) ** 2 + 1.0
    if np.any(area2 <= 1e-14 * scale):
        bad = int(np.argmin(area2))
        raise MeshError(f"triangle {bad} is not counterclockwise with positive area")

    chain = _boundary_chain(tri, len(v))
    if chain.shape != mesh.boundary_edges.shape or np.any(chain != mesh.boundary_edges):
        raise MeshError("boundary_edges do not match the canonical chain")

    nb = len(chain)
    used = set()
    for j, idx in enumerate(mesh.electrodes):
        idx = np.asarray(idx)
        if idx.size == 0:
            raise MeshError(f"electrode {j} has no edges")
        if idx.min() < 0 or idx.max() >= nb:
            raise MeshError(f"electrode {j} references a non-boundary edge")
        if np.any(np.diff(idx) != 1):
            raise MeshError(f"electrode {j} edge run is not contiguous")
        overlap = used.intersection(idx.tolist())
        if overlap:
            raise MeshError(f"electrode {j} shares boundary edges {sorted(overlap)}")
        used.update(idx.tolist())

    # Interior vertices must not poke outside the boundary circle.
    boundary_r = np.linalg.norm(v[chain[:, 0]], axis=1)
    r_out = boundary_r.max()
    if np.any(np.linalg.norm(v, axis=1) > r_out * (1.0 + 1e-9)):
        raise MeshError("vertex outside the closed disk spanned by the boundary")


def _ring_positions(count: int, stagger: bool):
    off = Fraction(1, 2 * count) if stagger else Fraction(0)
    return [Fraction(j, count) + off for j in range(count)]


def _annulus_triangles(outer_ids, outer_pos, inner_ids, inner_pos):
    """Triangulate the strip between two circularly sorted vertex rings.

    For each outer edge the apex is the angularly latest inner vertex not
    past the edge's end (ties included); for each inner edge the apex is
    the latest outer vertex strictly before the edge's end. The asymmetric
    tie rule keeps radially aligned vertices from double-covering a quad.
    """
    tris = []
    n_out, n_in = len(outer_ids), len(inner_ids)
    for i in range(n_out):
        i2 = (i + 1) % n_out
        j = bisect.bisect_right(inner_pos, outer_pos[i2]) - 1
        tris.append((outer_ids[i], outer_ids[i2], inner_ids[j % n_in]))
    for j in range(n_in):
        j2 = (j + 1) % n_in
        i = bisect.bisect_left(outer_pos, inner_pos[j2]) - 1
        tris.append((inner_ids[j2], inner_ids[j], outer_ids[i % n_out]))
    return tris


def build_disk_mesh(radius: float = 1.0, target_h: float = 0.08,
                    p: int = 16, coverage: float = 0.5) -> Mesh:
    """Build a structured disk mesh with p equally spaced electrode arcs.

    Parameters
    ----------
    radius : float
        Tank radius in meters.
    target_h : float
        Requested edge length; the vertex count scales like (radius/target_h)^2.
    p : int
        Electrode count, even and at least 4.
    coverage : float
        Fraction of the circumference covered by electrodes, in (0, 1).
        Each arc spans coverage * 2*pi/p, centered at angle 2*pi*j/p.
    """
    if radius <= 0:
        raise MeshError("radius must be positive")
    if not 0 < target_h < radius:
        raise MeshError("target_h must lie in (0, radius)")
    if p < 4 or p % 2:
        raise MeshError("electrode count must be even and at least 4")
    if not 0 < coverage < 1:
        raise MeshError("coverage must lie strictly between 0 and 1")

    cov = Fraction(coverage)
    arc_w = cov / p                      # electrode arc width, in turns
    gap_w = (1 - cov) / p
    arc_len = float(arc_w) * 2.0 * math.pi * radius
    gap_len = float(gap_w) * 2.0 * math.pi * radius
    k_e = round(arc_len / target_h)
    if k_e < 1:
        raise MeshError(
            f"electrode arc length {arc_len:.4g} is shorter than one boundary "
            f"edge at target_h={target_h:.4g}; refine target_h or reduce p"
        )
    k_g = max(1, round(gap_len / target_h))
    per = k_e + k_g
    n_b = p * per

    n_rings = max(2, round(radius / target_h))
    ring_counts = [0]
    for k in range(1, n_rings):
        natural = n_b * k / n_rings
        ring_counts.append(p * max(1, round(natural / p)))

    # Positions are rational turn fractions; construction order fixes ids.
    positions = [[Fraction(0)]]          # ring 0: the center vertex
    for k in range(1, n_rings):
        positions.append(_ring_positions(ring_counts[k], stagger=bool(k % 2)))
    boundary = []
    for j in range(p):
        start = Fraction(j, p) - arc_w / 2
        for t in range(k_e):
            boundary.append(start + arc_w * t / k_e)
        for g in range(k_g):
            boundary.append(start + arc_w + gap_w * g / k_g)
    positions.append(boundary)

    ids = []
    next_id = 0
    for ring in positions:
        ids.append(list(range(next_id, next_id + len(ring))))
        next_id += len(ring)

    coords = np.empty((next_id, 2), dtype=np.float64)
    coords[0] = (0.0, 0.0)
    for k in range(1, n_rings + 1):
        r = radius * (k / n_rings)
        for vid, frac in zip(ids[k], positions[k]):
            theta = 2.0 * math.pi * float(frac % 1)
            coords[vid] = (r * math.cos(theta), r * math.sin(theta))

    def ring_sorted(k):
        pos_norm = [f % 1 for f in positions[k]]
        order = sorted(range(len(pos_norm)), key=lambda t: pos_norm[t])
        return [ids[k][t] for t in order], [pos_norm[t] for t in order]

    tris = []
    fan_ids, _ = ring_sorted(1)
    for t in range(len(fan_ids)):
        tris.append((0, fan_ids[t], fan_ids[(t + 1) % len(fan_ids)]))
    for k in range(1, n_rings):
        inner_ids, inner_pos = ring_sorted(k)
        outer_ids, outer_pos = ring_sorted(k + 1)
        tris.extend(_annulus_triangles(outer_ids, outer_pos, inner_ids, inner_pos))

    triangles = np.array(tris, dtype=np.int64)
    area2 = _signed_area2(coords, triangles)
    flip = area2 < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    chain = _boundary_chain(triangles, next_id)
    edge_index = {(int(a), int(b)): i for i, (a, b) in enumerate(chain)}
    electrodes = []
    base = ids[n_rings][0]
    for j in range(p):
        first = base + j * per
        arc = []
        for t in range(k_e):
            a = first + t
            b = base + ((j * per + t + 1) % n_b)
            arc.append(edge_index[(a, b)])
        electrodes.append(np.array(arc, dtype=np.int64))

    mesh = Mesh(vertices=coords, triangles=triangles, boundary_edges=chain,
                electrodes=tuple(electrodes))
    validate_mesh(mesh)
    return mesh


def vertex_adjacency(mesh: Mesh) -> VertexAdjacency:
    """Neighbor lists and inverse-distance weights from triangle edges."""
    n = mesh.n
    neighbor_sets = [set() for _ in range(n)]
    for tri in mesh.triangles:
        a, b, c = (int(x) for x in tri)
        neighbor_sets[a].update((b, c))
        neighbor_sets[b].update((a, c))
        neighbor_sets[c].update((a, b))
    indptr = np.zeros(n + 1, dtype=np.int64)
    indices = []
    for i in range(n):
        nbrs = sorted(neighbor_sets[i])
        indices.extend(nbrs)
        indptr[i + 1] = indptr[i] + len(nbrs)
    indices = np.array(indices, dtype=np.int64)
    rows = np.repeat(np.arange(n), np.diff(indptr))
    dist = np.linalg.norm(mesh.vertices[rows] - mesh.vertices[indices], axis=1)
    if dist.size and dist.min() <= 0.0:
        k = int(np.argmin(dist))
        raise MeshError(f"duplicate vertices {rows[k]} and {indices[k]} (zero distance)")
    return VertexAdjacency(indptr=indptr, indices=indices, weights=1.0 / dist,
                           mesh_digest=mesh_digest(mesh))


def mesh_digest(mesh: Mesh) -> str:
    """Stable content hash over vertices, triangles, and electrodes."""
    h = hashlib.sha256()
    h.update(b"EITMESH")
    h.update(np.int64(mesh.version).tobytes())
    h.update(np.int64(mesh.n).tobytes())
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.int64(mesh.n_triangles).tobytes())
    h.update(np.ascontiguousarray(mesh.triangles, dtype="<i8").tobytes())
    h.update(np.int64(mesh.p).tobytes())
    for idx in mesh.electrodes:
        h.update(np.int64(len(idx)).tobytes())
        h.update(np.ascontiguousarray(idx, dtype="<i8").tobytes())
    return h.hexdigest()


def write_mesh(mesh: Mesh, path) -> None:
    obj = {
        "version": mesh.version,
        "vertices": [[float(x), float(y)] for x, y in mesh.vertices],
        "triangles": [[int(a), int(b), int(c)] for a, b, c in mesh.triangles],
        "electrodes": [[int(e) for e in idx] for idx in mesh.electrodes],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, separators=(",", ":"), sort_keys=True)


def mesh_from_arrays(vertices, triangles, electrodes=()) -> Mesh:
    """Build a validated Mesh from raw arrays, deriving the boundary chain."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    chain = _boundary_chain(triangles, len(vertices))
    mesh = Mesh(vertices=vertices, triangles=triangles, boundary_edges=chain,
                electrodes=tuple(np.asarray(idx, dtype=np.int64) for idx in electrodes))
    validate_mesh(mesh)
    return mesh


def read_mesh(path) -> Mesh:
    """Load a mesh file, rebuild the canonical boundary, and validate."""
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("version") != MESH_FORMAT_VERSION:
        raise MeshError(f"{path}: unsupported mesh format version {obj.get('version')}")
    return mesh_from_arrays(obj["vertices"], obj["triangles"], obj["electrodes"])
