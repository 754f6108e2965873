"""Triangle meshes: ingestion, validation, areas, truncated geodesics and
Loop subdivision."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import NonManifoldError, ParseError, ValidationError


class TriangleMesh:
    """An immutable triangle mesh.

    Args:
        vertices: (m, 3) coordinates.
        faces: (F, 3) vertex indices, counter-clockwise seen from outside.
        part_id: free-form label carried through the pipeline.
    """

    def __init__(self, vertices, faces, part_id: str = ""):
        v = np.array(vertices, dtype=np.float64)
        f = np.array(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (m, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be (F, 3), got {f.shape}")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f
        self.part_id = part_id

    def __repr__(self):
        return f"TriangleMesh(m={self.n_vertices}, F={self.n_faces}, part_id={self.part_id!r})"

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (E, 2) index pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @property
    def mean_edge_length(self) -> float:
        return float(self.edge_lengths.mean())

    @cached_property
    def face_areas(self) -> np.ndarray:
        v, f = self.vertices, self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def edge_graph(self) -> sparse.csr_matrix:
        """Symmetric sparse adjacency weighted by Euclidean edge length."""
        e, w = self.edges, self.edge_lengths
        m = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(m, m))

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted unit vertex normals."""
        v, f = self.vertices, self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        n = np.zeros_like(v)
        for c in range(3):
            np.add.at(n, f[:, c], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def with_vertices(self, vertices, part_id: str | None = None) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, self.part_id if part_id is None else part_id)

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        """Rigidly moved copy: x -> R x + t."""
        r = np.asarray(rotation, dtype=float)
        return self.with_vertices(self.vertices @ r.T + np.asarray(translation, dtype=float))

    def scaled(self, s: float) -> "TriangleMesh":
        return self.with_vertices(self.vertices * s)


def validate_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Check index bounds, face degeneracy and edge-connectivity.

    Returns the mesh unchanged so calls can be chained.
    """
    m, f = mesh.n_vertices, mesh.faces
    if m == 0 or mesh.n_faces == 0:
        raise ValidationError("mesh has no vertices or no faces")
    if f.min() < 0 or f.max() >= m:
        bad = int(np.argmax((f < 0).any(axis=1) | (f >= m).any(axis=1)))
        raise ValidationError(f"face {bad} references a vertex outside [0, {m})")
    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if repeated.any():
        raise ValidationError(f"face {int(np.argmax(repeated))} repeats a vertex index")
    extent = np.ptp(mesh.vertices, axis=0).max()
    tiny = 1e-14 * max(extent, np.finfo(float).tiny) ** 2
    flat = mesh.face_areas <= tiny
    if flat.any():
        raise ValidationError(f"face {int(np.argmax(flat))} has zero area")
    n_comp, _ = csgraph.connected_components(mesh.edge_graph, directed=False)
    if n_comp != 1:
        raise ValidationError(f"mesh has {n_comp} connected components, expected 1")
    return mesh


def is_closed_manifold(mesh: TriangleMesh) -> bool:
    """True when every edge borders exactly two faces."""
    return bool(np.all(_edge_face_counts(mesh) == 2))


def _edge_face_counts(mesh):
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


# ---------------------------------------------------------------- I/O

def load_mesh(path, format: str | None = None, part_id: str | None = None) -> TriangleMesh:
    """Read an OFF, OBJ or ASCII PLY file and validate it.

    Raises:
        ParseError: the file is malformed for the declared format.
        ValidationError: the parsed mesh violates a mesh invariant.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    readers = {"off": _read_off, "obj": _read_obj, "ply": _read_ply}
    if fmt not in readers:
        raise ParseError(f"unsupported mesh format {fmt!r}")
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text file (binary formats are unsupported)") from exc
    try:
        vertices, faces = readers[fmt](text)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    mesh = TriangleMesh(vertices, faces, part_id=path.stem if part_id is None else part_id)
    return validate_mesh(mesh)


def _tokens(text):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line.split()


def _read_off(text):
    lines = list(_tokens(text))
    if not lines or not lines[0][0].upper().endswith("OFF"):
        raise ValueError("missing OFF header")
    head = lines[0][1:]
    body = lines[1:]
    if not head:
        head, body = body[0], body[1:]
    nv, nf = int(head[0]), int(head[1])
    if len(body) < nv + nf:
        raise ValueError(f"expected {nv} vertices and {nf} faces, file is truncated")
    verts = [[float(x) for x in row[:3]] for row in body[:nv]]
    faces = []
    for row in body[nv:nv + nf]:
        if int(row[0]) != 3:
            raise ValueError("only triangular faces are supported")
        faces.append([int(x) for x in row[1:4]])
    if any(len(v) != 3 for v in verts):
        raise ValueError("vertex with fewer than 3 coordinates")
    return verts, faces


def _read_obj(text):
    verts, faces = [], []
    for row in _tokens(text):
        if row[0] == "v":
            verts.append([float(x) for x in row[1:4]])
            if len(verts[-1]) != 3:
                raise ValueError("vertex with fewer than 3 coordinates")
        elif row[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in row[1:]]
            if len(idx) != 3:
                raise ValueError("only triangular faces are supported")
            n = len(verts)
            faces.append([i - 1 if i > 0 else n + i for i in idx])
    return verts, faces


def _read_ply(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("missing ply magic")
    elements, i = [], 1
    fmt = None
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
    else:
        raise ValueError("missing end_header")
    if fmt != "ascii":
        raise ValueError(f"only ASCII PLY is supported, got {fmt!r}")
    body = [ln.split() for ln in lines[i:] if ln.strip()]
    verts, faces, pos = [], [], 0
    for name, count, props in elements:
        rows = body[pos:pos + count]
        if len(rows) < count:
            raise ValueError(f"element {name} is truncated")
        pos += count
        if name == "vertex":
            cols = [props.index(c) for c in ("x", "y", "z")]
            verts = [[float(r[c]) for c in cols] for r in rows]
        elif name == "face":
            for r in rows:
                if int(r[0]) != 3:
                    raise ValueError("only triangular faces are supported")
                faces.append([int(x) for x in r[1:4]])
    return verts, faces


def write_off(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"OFF\n{mesh.n_vertices} {mesh.n_faces} 0\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        np.savetxt(fh, np.column_stack([np.full(mesh.n_faces, 3), mesh.faces]), fmt="%d")


def write_ply(mesh: TriangleMesh, path, scalars: dict | None = None) -> None:
    """ASCII PLY writer with optional per-vertex float properties."""
    scalars = scalars or {}
    cols = [mesh.vertices] + [np.asarray(v, dtype=float).reshape(-1, 1) for v in scalars.values()]
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        for c in "xyz":
            fh.write(f"property double {c}\n")
        for name in scalars:
            fh.write(f"property double {name}\n")
        fh.write(f"element face {mesh.n_faces}\nproperty list uchar int vertex_indices\nend_header\n")
        np.savetxt(fh, np.hstack(cols), fmt="%.17g")
        np.savetxt(fh, np.column_stack([np.full(mesh.n_faces, 3), mesh.faces]), fmt="%d")


# ---------------------------------------------------------------- geometry

def one_ring_areas(mesh: TriangleMesh) -> np.ndarray:
    """Per-vertex sum of the areas of all incident triangles."""
    area = np.zeros(mesh.n_vertices)
    fa = mesh.face_areas
    for c in range(3):
        np.add.at(area, mesh.faces[:, c], fa)
    return area


@dataclass(frozen=True, eq=False)
class GeodesicNeighborhood:
    """Truncated distances stored row-wise (CSR layout).

    Row ``i`` lists every vertex within the truncation radius of vertex ``i``,
    itself included at distance 0.
    """

    indptr: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    radius: float

    @property
    def n_vertices(self) -> int:
        return len(self.indptr) - 1

    def neighbors(self, i: int):
        s = slice(self.indptr[i], self.indptr[i + 1])
        return self.indices[s], self.distances[s]

    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_vertices), np.diff(self.indptr))

    def to_dense(self, fill: float = np.inf) -> np.ndarray:
        m = self.n_vertices
        out = np.full((m, m), fill)
        out[self.rows(), self.indices] = self.distances
        return out


def truncated_geodesics(mesh: TriangleMesh, radius: float) -> GeodesicNeighborhood:
    """Edge-graph shortest-path distances up to ``radius`` from every vertex.

    Dijkstra runs on the mesh edge graph with Euclidean edge weights and is
    cut off at ``radius``; the work is done in row blocks so memory stays
    bounded on large meshes.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    graph = mesh.edge_graph
    m = mesh.n_vertices
    block = max(1, int(4_000_000 // m))
    indptr = [np.zeros(1, dtype=np.int64)]
    indices, dists = [], []
    count = 0
    limit = radius if np.isfinite(radius) else np.inf
    for start in range(0, m, block):
        rows = np.arange(start, min(m, start + block))
        d = csgraph.dijkstra(graph, directed=False, indices=rows, limit=limit)
        r, c = np.nonzero(np.isfinite(d))
        indices.append(c)
        dists.append(d[r, c])
        counts = np.bincount(r, minlength=len(rows))
        indptr.append(count + np.cumsum(counts))
        count += int(counts.sum())
    return GeodesicNeighborhood(
        indptr=np.concatenate(indptr),
        indices=np.concatenate(indices).astype(np.int64),
        distances=np.concatenate(dists),
        radius=float(radius),
    )


# ---------------------------------------------------------------- subdivision

def _loop_once(vertices, faces):
    m = len(vertices)
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    opposite = np.concatenate([faces[:, 2], faces[:, 0], faces[:, 1]])
    key = np.sort(half, axis=1)
    edges, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts != 2):
        bad = edges[np.argmax(counts != 2)]
        raise NonManifoldError(f"edge {tuple(int(x) for x in bad)} borders {counts[counts != 2][0]} faces")

    opp_sum = np.zeros((len(edges), 3))
    np.add.at(opp_sum, inverse, vertices[opposite])
    edge_pts = 0.375 * (vertices[edges[:, 0]] + vertices[edges[:, 1]]) + 0.125 * opp_sum

    valence = np.bincount(edges.ravel(), minlength=m).astype(float)
    nbr_sum = np.zeros((m, 3))
    np.add.at(nbr_sum, edges[:, 0], vertices[edges[:, 1]])
    np.add.at(nbr_sum, edges[:, 1], vertices[edges[:, 0]])
    beta = (0.625 - (0.375 + 0.25 * np.cos(2 * np.pi / valence)) ** 2) / valence
    vert_pts = (1 - valence * beta)[:, None] * vertices + beta[:, None] * nbr_sum

    nf = len(faces)
    e01, e12, e20 = (m + inverse[k * nf:(k + 1) * nf] for k in range(3))
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate([
        np.column_stack([a, e01, e20]),
        np.column_stack([b, e12, e01]),
        np.column_stack([c, e20, e12]),
        np.column_stack([e01, e12, e20]),
    ])
    return np.vstack([vert_pts, edge_pts]), new_faces


def loop_subdivide(mesh: TriangleMesh, levels: int = 1) -> TriangleMesh:
    """Loop subdivision of a closed manifold mesh.

    Each level maps (V, F) to (V + E, 4F) using Loop's original vertex mask
    ``beta = (5/8 - (3/8 + cos(2 pi / n) / 4)^2) / n`` and the 3/8-1/8 edge mask.

    Raises:
        NonManifoldError: an edge borders other than two faces.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    v, f = np.array(mesh.vertices), np.array(mesh.faces)
    for _ in range(levels):
        v, f = _loop_once(v, f)
    return TriangleMesh(v, f, part_id=mesh.part_id)
