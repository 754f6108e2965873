"""Heat-kernel mesh Laplacians in the symmetrizable form L~ = B^-1 L."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import DegenerateBandwidth, EmptyNeighborhood, ValidationError
from .mesh import TriangleMesh, one_ring_areas, truncated_geodesics

FLUSH = 1e-300
DENSE_LIMIT = 5000


@dataclass(frozen=True)
class BandwidthPolicy:
    """How the kernel bandwidth ``t`` and truncation radius ``r`` are chosen.

    ``auto`` uses t = (mean edge length)^2, ``fixed`` uses ``t_value``.
    The radius is ``radius`` when given, else ``radius_multiplier * sqrt(t)``.
    """

    mode: str = "auto"
    t_value: float | None = None
    radius_multiplier: float = 6.0
    radius: float | None = None

    def __post_init__(self):
        if self.mode not in ("auto", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.mode!r}")
        if self.mode == "fixed" and self.t_value is None:
            raise ValueError("fixed bandwidth needs t_value")

    def resolve(self, mesh: TriangleMesh) -> tuple[float, float]:
        if self.mode == "auto":
            t = mesh.mean_edge_length ** 2
        else:
            t = float(self.t_value)
        if not (np.isfinite(t) and t > 0):
            raise DegenerateBandwidth(f"bandwidth t resolved to {t}")
        r = self.radius if self.radius is not None else self.radius_multiplier * np.sqrt(t)
        if not r > 0:
            raise DegenerateBandwidth(f"truncation radius resolved to {r}")
        return t, float(r)


@dataclass(frozen=True, eq=False)
class LaplacianPair:
    """Stiffness ``L`` (sparse symmetric) and diagonal mass ``B`` with
    L~ = B^-1 L = D - W.

    Attributes:
        stiffness: L = B D - B W, CSR.
        mass: diagonal of B (one-ring areas).
        weights: the kernel matrix W, CSR, diagonal included.
        t: kernel bandwidth.
        radius: truncation radius (``inf`` for the full variant).
        variant: ``"localized"`` or ``"mesh"``.
    """

    stiffness: sparse.csr_matrix
    mass: np.ndarray
    weights: sparse.csr_matrix
    t: float
    radius: float
    variant: str

    @property
    def size(self) -> int:
        return self.mass.shape[0]

    @cached_property
    def operator(self) -> sparse.csr_matrix:
        """L~ = B^-1 L."""
        return sparse.diags(1.0 / self.mass) @ self.stiffness

    @cached_property
    def degree(self) -> np.ndarray:
        """Diagonal of D (row sums of W)."""
        return np.asarray(self.weights.sum(axis=1)).ravel()


def _kernel(d2, t):
    g = np.exp(-d2 / (4.0 * t)) / (12.0 * np.pi * t * t)
    g[g < FLUSH] = 0.0
    return g


def _assemble(rows, cols, g, areas, t, radius, variant):
    """Build the pair from symmetric kernel values g_ij on off-diagonal pairs
    (each unordered pair listed once)."""
    m = areas.shape[0]
    keep = g > 0
    rows, cols, g = rows[keep], cols[keep], g[keep]
    diag = np.full(m, 1.0 / (12.0 * np.pi * t * t))
    # K = B W, K_ij = A_i A_j g_ij, symmetric by construction
    kij = areas[rows] * areas[cols] * g
    r2 = np.concatenate([rows, cols])
    c2 = np.concatenate([cols, rows])
    k_off = sparse.csr_matrix((np.concatenate([kij, kij]), (r2, c2)), shape=(m, m))
    k_off.sum_duplicates()
    lonely = np.diff(k_off.indptr) == 0
    if lonely.any():
        raise EmptyNeighborhood(
            f"vertex {int(np.argmax(lonely))} has no neighbour within radius {radius:g}"
        )
    stiffness = (sparse.diags(np.asarray(k_off.sum(axis=1)).ravel()) - k_off).tocsr()
    w_off = sparse.diags(1.0 / areas) @ k_off
    weights = (w_off + sparse.diags(diag * areas)).tocsr()
    return LaplacianPair(stiffness, areas, weights, float(t), float(radius), variant)


def build_localized(
    mesh: TriangleMesh,
    policy: BandwidthPolicy | None = None,
    geodesic: str = "chord",
) -> LaplacianPair:
    """Localized Mesh Laplacian.

    W_ij = A_j exp(-d_ij^2 / 4t) / (12 pi t^2) for pairs within the
    truncation radius, with A the one-ring areas. Neighbourhoods are the
    edge-graph geodesic balls of radius r. ``geodesic`` picks the distance
    fed to the kernel inside the ball: ``"chord"`` (Euclidean, default) or
    ``"edge"`` (the edge-graph path length itself, which overestimates the
    surface distance and biases the spectrum low).

    Raises:
        DegenerateBandwidth: t or r resolved to a non-positive value.
        EmptyNeighborhood: some vertex has no neighbour within r.
    """
    if geodesic not in ("chord", "edge"):
        raise ValueError(f"unknown geodesic mode {geodesic!r}")
    policy = policy or BandwidthPolicy()
    t, r = policy.resolve(mesh)
    nb = truncated_geodesics(mesh, r)
    rows = nb.rows()
    cols = nb.indices
    upper = cols > rows
    rows, cols = rows[upper], cols[upper]
    if geodesic == "chord":
        diff = mesh.vertices[rows] - mesh.vertices[cols]
        d2 = np.einsum("ij,ij->i", diff, diff)
    else:
        d2 = nb.distances[upper] ** 2
    return _assemble(rows, cols, _kernel(d2, t), one_ring_areas(mesh), t, r, "localized")


def build_mesh_laplacian(mesh: TriangleMesh, policy: BandwidthPolicy | None = None) -> LaplacianPair:
    """Full Mesh Laplacian: Euclidean distances, no truncation.

    Dense in the number of pairs, so only meshes with at most 5000 vertices
    are accepted.
    """
    m = mesh.n_vertices
    if m > DENSE_LIMIT:
        raise ValidationError(f"full mesh Laplacian limited to {DENSE_LIMIT} vertices, got {m}")
    policy = policy or BandwidthPolicy()
    t, _ = policy.resolve(mesh)
    rows, cols = np.triu_indices(m, k=1)
    diff = mesh.vertices[rows] - mesh.vertices[cols]
    d2 = np.einsum("ij,ij->i", diff, diff)
    return _assemble(rows, cols, _kernel(d2, t), one_ring_areas(mesh), t, np.inf, "mesh")


def symmetrize(pair: LaplacianPair) -> sparse.csr_matrix:
    """S = B^-1/2 L B^-1/2, which shares its spectrum with B^-1 L."""
    s = sparse.diags(1.0 / np.sqrt(pair.mass))
    out = (s @ pair.stiffness @ s).tocsr()
    # enforce exact symmetry against rounding in the two-sided scaling
    return ((out + out.T) * 0.5).tocsr()


def weights_to_laplacian(weights) -> sparse.csr_matrix:
    """D - W for an arbitrary weight matrix; the diagonal of W cancels."""
    w = sparse.csr_matrix(weights, dtype=float)
    w = w - sparse.diags(w.diagonal())
    return (sparse.diags(np.asarray(w.sum(axis=1)).ravel()) - w).tocsr()


def graph_laplacian(mesh: TriangleMesh) -> sparse.csr_matrix:
    """Combinatorial graph Laplacian D - A of the mesh edge graph."""
    adj = (mesh.edge_graph > 0).astype(float)
    return (sparse.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj).tocsr()


def dump_coo(matrix, path) -> None:
    """Write a sparse matrix as ``row col value`` text lines."""
    coo = sparse.coo_matrix(matrix)
    np.savetxt(path, np.column_stack([coo.row, coo.col, coo.data]), fmt=["%d", "%d", "%.17g"])
