"""
Triangle Mesh Core
==================
Reference mesh representation, 1-ring / 2-ring neighborhoods, dihedral pairs,
cotangent weights and OBJ text IO.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateTriangleError, MeshParseError, NonManifoldError

logger = logging.getLogger("shellflow.mesh")

# Relative to the squared bounding-box diagonal
AREA_EPS = 1e-14


# ============== TriMesh ==============

@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh; vertices (K, 3) in meters, triangles (T, 3)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        vertices.flags.writeable = False
        triangles.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        self._validate()

    @property
    def K(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def bbox_diagonal(self, positions: np.ndarray = None) -> float:
        p = self.vertices if positions is None else np.asarray(positions).reshape(-1, 3)
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))

    def _validate(self):
        if not np.all(np.isfinite(self.vertices)):
            raise MeshParseError("non-finite vertex coordinate")
        tris = self.triangles
        if tris.size == 0:
            return
        if tris.min() < 0 or tris.max() >= self.K:
            bad = int(np.flatnonzero((tris < 0).any(axis=1) | (tris >= self.K).any(axis=1))[0])
            raise MeshParseError(f"triangle {bad} references a vertex outside [0, {self.K})")

        repeated = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        if repeated.any():
            raise DegenerateTriangleError(int(np.flatnonzero(repeated)[0]), "repeated vertex index")

        areas = triangle_areas(self.vertices, tris)
        scale = max(self.bbox_diagonal(), 1e-300) ** 2
        flat = areas <= AREA_EPS * scale
        if flat.any():
            raise DegenerateTriangleError(int(np.flatnonzero(flat)[0]))

        keys = _edge_keys(tris, self.K)
        unique, counts = np.unique(keys, return_counts=True)
        if counts.max() > 2:
            key = int(unique[np.argmax(counts)])
            raise NonManifoldError((key // self.K, key % self.K), int(counts.max()))


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = np.asarray(vertices).reshape(-1, 3)
    a, b, c = p[triangles[:, 0]], p[triangles[:, 1]], p[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def vertex_normals(mesh: TriMesh, positions: np.ndarray = None) -> np.ndarray:
    """
    Area-weighted (un-normalized) vertex normals: sum of incident triangle
    area vectors. Scales quadratically with the shape.
    """
    p = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles
    area_vectors = 0.5 * np.cross(p[tris[:, 1]] - p[tris[:, 0]], p[tris[:, 2]] - p[tris[:, 0]])
    normals = np.zeros_like(p)
    for corner in range(3):
        np.add.at(normals, tris[:, corner], area_vectors)
    return normals


def _edge_keys(triangles: np.ndarray, K: int) -> np.ndarray:
    """Undirected key min*K + max for every half-edge, in triangle-major order."""
    a = triangles[:, [0, 1, 2]].ravel()
    b = triangles[:, [1, 2, 0]].ravel()
    return np.minimum(a, b) * K + np.maximum(a, b)


# ============== Adjacency ==============

@dataclass(frozen=True, eq=False)
class DihedralPairs:
    """
    Two triangles sharing an interior edge. `edges[p] = (i, j)` follows the
    orientation of `tri_a`; `opposite[p] = (k, l)` are the vertices not on the
    edge in `tri_a` and `tri_b`.
    """
    tri_a: np.ndarray
    tri_b: np.ndarray
    edges: np.ndarray
    opposite: np.ndarray

    def __len__(self) -> int:
        return int(self.tri_a.shape[0])


@dataclass(frozen=True, eq=False)
class Adjacency:
    one_ring: list[np.ndarray]
    two_ring: list[np.ndarray]
    edges: np.ndarray             # (E, 2), i < j, lexicographic
    edge_triangles: list[list[int]]
    boundary_edges: np.ndarray    # (E,) bool
    dihedral: DihedralPairs
    _edge_index: dict = field(repr=False, default_factory=dict)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def edge_id(self, i: int, j: int) -> int:
        return self._edge_index[(min(i, j), max(i, j))]

    def boundary_vertices(self) -> np.ndarray:
        K = len(self.one_ring)
        mask = np.zeros(K, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    def degree(self) -> np.ndarray:
        return np.array([len(r) for r in self.one_ring], dtype=np.int64)


def build_adjacency(mesh: TriMesh) -> Adjacency:
    """1-ring, 2-ring (graph distance exactly two), unique edges and dihedral pairs."""
    K = mesh.K
    tris = mesh.triangles

    half_edges: dict[tuple[int, int], list[tuple[int, int, int, int]]] = {}
    for t, (a, b, c) in enumerate(tris.tolist()):
        for i, j, k in ((a, b, c), (b, c, a), (c, a, b)):
            half_edges.setdefault((min(i, j), max(i, j)), []).append((t, i, j, k))

    edge_list = sorted(half_edges)
    edges = np.array(edge_list, dtype=np.int64).reshape(-1, 2)
    edge_index = {e: n for n, e in enumerate(edge_list)}
    edge_triangles = [[h[0] for h in half_edges[e]] for e in edge_list]
    boundary = np.array([len(half_edges[e]) == 1 for e in edge_list], dtype=bool)

    tri_a, tri_b, pair_edges, opposite = [], [], [], []
    for e in edge_list:
        incident = half_edges[e]
        if len(incident) != 2:
            continue
        (ta, i, j, k), (tb, _, _, l) = incident
        tri_a.append(ta)
        tri_b.append(tb)
        pair_edges.append((i, j))
        opposite.append((k, l))
    dihedral = DihedralPairs(
        tri_a=np.array(tri_a, dtype=np.int64),
        tri_b=np.array(tri_b, dtype=np.int64),
        edges=np.array(pair_edges, dtype=np.int64).reshape(-1, 2),
        opposite=np.array(opposite, dtype=np.int64).reshape(-1, 2),
    )

    graph = edge_graph(K, edges)
    one_ring = [np.sort(graph.indices[graph.indptr[i]:graph.indptr[i + 1]]) for i in range(K)]

    reach2 = (graph @ graph).tocsr()
    reach2.sort_indices()
    two_ring = []
    for i in range(K):
        candidates = reach2.indices[reach2.indptr[i]:reach2.indptr[i + 1]]
        excluded = np.append(one_ring[i], i)
        two_ring.append(np.setdiff1d(candidates, excluded, assume_unique=False))

    logger.debug(f"Adjacency: K={K}, edges={len(edge_list)}, dihedral pairs={len(dihedral)}")
    return Adjacency(
        one_ring=one_ring,
        two_ring=two_ring,
        edges=edges,
        edge_triangles=edge_triangles,
        boundary_edges=boundary,
        dihedral=dihedral,
        _edge_index=edge_index,
    )


def edge_graph(K: int, edges: np.ndarray) -> sp.csr_matrix:
    """Symmetric 0/1 vertex adjacency matrix."""
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    graph = sp.coo_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(K, K)).tocsr()
    graph.sort_indices()
    return graph


# ============== Cotangent weights ==============

@dataclass(frozen=True, eq=False)
class CotanWeights:
    """c_ij = 1/2 sum of cot of the angles opposite edge (i, j), one entry per unique edge."""
    edges: np.ndarray
    values: np.ndarray
    _index: dict = field(repr=False, default_factory=dict)

    def __getitem__(self, pair: tuple[int, int]) -> float:
        i, j = pair
        return float(self.values[self._index[(min(i, j), max(i, j))]])

    def __len__(self) -> int:
        return int(self.values.shape[0])


def cotan_weights(mesh: TriMesh, adjacency: Adjacency = None) -> CotanWeights:
    adjacency = adjacency or build_adjacency(mesh)
    p = mesh.vertices
    values = np.zeros(adjacency.n_edges)

    for t, tri in enumerate(mesh.triangles.tolist()):
        for corner in range(3):
            k = tri[corner]
            i, j = tri[(corner + 1) % 3], tri[(corner + 2) % 3]
            u, v = p[i] - p[k], p[j] - p[k]
            sin_area = np.linalg.norm(np.cross(u, v))
            cot = np.dot(u, v) / sin_area if sin_area > 0 else np.inf
            if not np.isfinite(cot):
                raise DegenerateTriangleError(t, f"non-finite cotangent at vertex {k}")
            values[adjacency.edge_id(i, j)] += 0.5 * cot

    return CotanWeights(edges=adjacency.edges, values=values, _index=dict(adjacency._edge_index))


# ============== OBJ IO ==============

def load_obj(path: Union[str, Path]) -> TriMesh:
    """Read `v` and triangular `f` records; every other record is ignored."""
    vertices, faces = [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tokens = raw.split("#", 1)[0].split()
            if not tokens:
                continue
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise MeshParseError("vertex record needs 3 coordinates", lineno)
                try:
                    vertices.append([float(x) for x in tokens[1:4]])
                except ValueError as exc:
                    raise MeshParseError(f"bad vertex coordinate ({exc})", lineno) from exc
            elif tag == "f":
                corners = tokens[1:]
                if len(corners) != 3:
                    raise MeshParseError(f"face with {len(corners)} vertices; only triangles are supported", lineno)
                face = []
                for corner in corners:
                    try:
                        idx = int(corner.split("/")[0])
                    except ValueError as exc:
                        raise MeshParseError(f"bad face index '{corner}'", lineno) from exc
                    if idx == 0:
                        raise MeshParseError("face index 0 (OBJ indices are 1-based)", lineno)
                    face.append(idx - 1 if idx > 0 else len(vertices) + idx)
                faces.append(face)

    if not vertices:
        raise MeshParseError(f"no vertices in {path}")
    mesh = TriMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))
    logger.debug(f"Loaded {path}: K={mesh.K}, T={mesh.n_triangles}")
    return mesh


def save_obj(mesh: TriMesh, path: Union[str, Path], positions: np.ndarray = None):
    """Write `v`/`f` records, 9 significant digits, 1-based indices."""
    p = mesh.vertices if positions is None else np.asarray(positions).reshape(-1, 3)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in p.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
