"""Synthetic parts: barrel cylinders, icospheres, a toothed prototype block
with chip/protrusion defects, and measurement noise."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .errors import DefectOutOfBounds, FactorizationFailure, ValidationError
from .mesh import TriangleMesh

DENSE_NOISE_LIMIT = 5000


# ---------------------------------------------------------------- cylinders

@dataclass(frozen=True)
class CylinderSpec:
    """Capped cylinder with a half-sine barrel defect on the radius.

    The lateral radius at height h is ``radius + amplitude * delta * sin(h pi / height)``
    where ``amplitude`` is the noise standard deviation 0.05.
    """

    radius: float = 10.0
    height: float = 50.0
    delta: float = 0.0
    target_vertices: tuple[int, int] = (1995, 2005)
    seed: int = 0
    amplitude: float = 0.05

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        lo, hi = self.target_vertices
        if not 60 <= lo <= hi:
            raise ValueError(f"bad vertex interval {self.target_vertices}")

    def radius_at(self, h):
        return self.radius + self.amplitude * self.delta * np.sin(np.asarray(h) * np.pi / self.height)


def _stitch(ring_a, ang_a, ring_b, ang_b):
    """Triangulate the band between two closed vertex loops by sweeping angle.

    Orientation is fixed afterwards by the caller.
    """
    na, nb = len(ring_a), len(ring_b)
    if na == 1 or nb == 1:
        c, ring, n = (ring_a[0], ring_b, nb) if na == 1 else (ring_b[0], ring_a, na)
        return [(c, ring[i], ring[(i + 1) % n]) for i in range(n)]
    twopi = 2 * np.pi
    a = np.mod(ang_a - ang_a[0], twopi)
    b = np.mod(ang_b - ang_a[0] + np.pi / nb, twopi) - np.pi / nb
    j0 = int(np.argmin(np.abs(b)))
    order_b = [(j0 + s) % nb for s in range(nb + 1)]
    bb = np.unwrap(b[order_b])
    aa = np.append(a, twopi)
    tris, i, j = [], 0, 0
    while i < na or j < nb:
        adv_a = j == nb or (i < na and aa[i + 1] <= bb[j + 1])
        if adv_a:
            tris.append((ring_a[i % na], ring_a[(i + 1) % na], ring_b[order_b[j]]))
            i += 1
        else:
            tris.append((ring_a[i % na], ring_b[order_b[j + 1]], ring_b[order_b[j]]))
            j += 1
    return tris


def _orient(vertices, faces, outward):
    """Flip faces whose normal disagrees with the given outward directions."""
    v = vertices
    n = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    flip = np.einsum("ij,ij->i", n, outward) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _cap_counts(n_theta, n_rings):
    # ring 0 is the centre, ring n_rings is the shared lateral boundary
    return [1] + [max(3, int(round(n_theta * j / n_rings))) for j in range(1, n_rings)]


def _cylinder_layout(spec, rng):
    """Pick (n_theta, n_z, cap ring counts) hitting a random vertex target."""
    target = int(rng.integers(spec.target_vertices[0], spec.target_vertices[1] + 1))
    area = 2 * np.pi * spec.radius * spec.height + 2 * np.pi * spec.radius ** 2
    s = np.sqrt(area / (target * np.sqrt(3) / 2))
    base_theta = 2 * np.pi * spec.radius / s
    for _ in range(1000):
        n_theta = max(6, int(round(base_theta * rng.uniform(0.93, 1.07))))
        ds = 2 * np.pi * spec.radius / n_theta
        n_rings = max(1, int(round(spec.radius / (ds * np.sqrt(3) / 2))))
        caps = _cap_counts(n_theta, n_rings)
        lateral_budget = target - 2 * sum(caps)
        n_z = lateral_budget // n_theta - 1
        if n_z < 1:
            continue
        extra = lateral_budget - n_theta * (n_z + 1)
        # distribute the remainder over the inner cap rings of both caps
        inner = list(range(n_rings - 1, 0, -1))
        if not inner and extra:
            continue
        top, bottom = list(caps), list(caps)
        for e in range(extra):
            which = top if e % 2 == 0 else bottom
            which[inner[(e // 2) % len(inner)]] += 1
        dz = spec.height / n_z
        if 0.6 < dz / (ds * np.sqrt(3) / 2) < 1.6:
            return n_theta, n_z, bottom, top
    raise ValueError("could not find a cylinder layout for the requested vertex count")


def make_cylinder(spec: CylinderSpec) -> TriangleMesh:
    """Closed capped cylinder with the barrel profile of ``spec``.

    The angular and axial resolution are randomised (per seed) so that the
    vertex count lands uniformly in ``spec.target_vertices``. Lateral rings
    are staggered by half a step to keep triangles close to equilateral.
    """
    rng = np.random.default_rng(spec.seed)
    n_theta, n_z, bottom, top = _cylinder_layout(spec, rng)
    verts, outward, tris = [], [], []

    def add_ring(count, rad, z, phase, normal):
        ids = np.arange(len(verts), len(verts) + count)
        ang = phase + 2 * np.pi * np.arange(count) / count
        if count == 1:
            verts.append((0.0, 0.0, z))
        else:
            verts.extend(np.column_stack([rad * np.cos(ang), rad * np.sin(ang), np.full(count, z)]))
        outward.extend([normal] * count)
        return ids, ang

    heights = spec.height * np.arange(n_z + 1) / n_z
    radii = spec.radius_at(heights)
    radii[0] = radii[-1] = spec.radius
    lat = []
    for r_i, (h, rad) in enumerate(zip(heights, radii)):
        phase = np.pi / n_theta * (r_i % 2)
        lat.append(add_ring(n_theta, rad, h, phase, None))
    for r_i in range(n_z):
        tris.extend(_stitch(*lat[r_i], *lat[r_i + 1]))

    def cap(counts, z, boundary, normal):
        n_rings = len(counts)
        rings = []
        for j, c in enumerate(counts):
            rad = spec.radius * j / n_rings
            rings.append(add_ring(c, rad, z, 0.37 * j, normal))
        rings.append(boundary)
        for j in range(n_rings):
            tris.extend(_stitch(*rings[j], *rings[j + 1]))

    n_lat = len(verts)
    cap(bottom, 0.0, lat[0], (0.0, 0.0, -1.0))
    cap(top, spec.height, lat[-1], (0.0, 0.0, 1.0))

    v = np.asarray(verts, dtype=float)
    f = np.asarray(tris, dtype=np.int64)
    cen = v[f].mean(axis=1)
    out = np.zeros_like(cen)
    is_lat = np.all(f < n_lat, axis=1)
    out[is_lat, :2] = cen[is_lat, :2]
    out[~is_lat, 2] = np.sign(cen[~is_lat, 2] - spec.height / 2)
    f = _orient(v, f, out)
    return TriangleMesh(v, f, part_id=f"cyl-d{spec.delta:g}-s{spec.seed}")


# ---------------------------------------------------------------- sphere

def _icosahedron():
    p = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
                  [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9],
                  [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2],
                  [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10],
                  [8, 6, 7], [9, 8, 1]])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def make_icosphere(subdivisions: int = 4, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron refined by midpoint splits, every vertex projected to the
    sphere. Vertex count is 10 * 4^s + 2."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    v, f = _icosahedron()
    for _ in range(subdivisions):
        half = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges, inv = np.unique(np.sort(half, axis=1), axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = v[edges[:, 0]] + v[edges[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        n, nf = len(v), len(f)
        ab, bc, ca = (n + inv[k * nf:(k + 1) * nf] for k in range(3))
        a, b, c = f.T
        f = np.concatenate([np.column_stack(x) for x in
                            ([a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca])])
        v = np.vstack([v, mid])
    return TriangleMesh(v * radius, f, part_id=f"icosphere-{subdivisions}")


# ---------------------------------------------------------------- prototype

@dataclass(frozen=True)
class DefectSpec:
    """A localized defect.

    ``center`` is a vertex index or a 3D coordinate (snapped to the nearest
    vertex). Vertices within ``radius`` of the centre form the ground-truth
    set. ``chip`` flattens them onto the plane ``magnitude`` below the centre
    along its normal; ``protrusion`` moves them outward along their normals
    by ``magnitude``.
    """

    kind: str
    center: object
    radius: float
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("chip", "protrusion"):
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("defect radius must be positive")


@dataclass
class GroundTruth:
    kind: str | None
    vertex_ids: list = field(default_factory=list)
    magnitude: float = 0.0
    seed: int = 0

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


# block with teeth on a unit voxel lattice: (x, y, z) extents in voxels
_BASE = (14, 5, 3)
_TEETH_X = (1, 4, 7, 10)
_TOOTH = (2, 5, 3)
_VOXEL = 3.0


def _prototype_voxels():
    occ = np.zeros((_BASE[0], _BASE[1], _BASE[2] + _TOOTH[2]), bool)
    occ[:, :, :_BASE[2]] = True
    for x0 in _TEETH_X:
        occ[x0:x0 + _TOOTH[0], :_TOOTH[1], _BASE[2]:] = True
    return occ


def _voxel_surface(occ, sub):
    """Boundary of a voxel set, each unit face split into sub x sub quads,
    each quad into two triangles; vertices are shared on the fine lattice."""
    pad = np.pad(occ, 1)
    key, verts, faces = {}, [], []

    def vid(p):
        if p not in key:
            key[p] = len(verts)
            verts.append(p)
        return key[p]

    dirs = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]
    for idx in np.argwhere(occ):
        i, j, k = idx + 1
        for ax, sgn in dirs:
            nb = [i, j, k]
            nb[ax] += sgn
            if pad[tuple(nb)]:
                continue
            u_ax, v_ax = [a for a in range(3) if a != ax]
            base = (idx * sub).tolist()
            if sgn > 0:
                base[ax] += sub
            for a in range(sub):
                for b in range(sub):
                    corners = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = list(base)
                        p[u_ax] += a + da
                        p[v_ax] += b + db
                        corners.append(vid(tuple(p)))
                    q0, q1, q2, q3 = corners
                    # alternate the diagonal for a more isotropic pattern
                    if (a + b) % 2:
                        faces += [(q0, q1, q2), (q0, q2, q3)]
                    else:
                        faces += [(q0, q1, q3), (q1, q2, q3)]
    v = np.asarray(verts, float) / sub
    f = np.asarray(faces, np.int64)
    # orient outward: use the face-normal axis sign from the voxel test
    return v, f


def _orient_by_volume(v, f):
    """Make face orientation consistent (by BFS) and outward (positive volume)."""
    from collections import deque

    e_to_f = {}
    for fi, tri in enumerate(f):
        for s in range(3):
            a, b = tri[s], tri[(s + 1) % 3]
            e_to_f.setdefault((min(a, b), max(a, b)), []).append(fi)
    f = f.copy()
    seen = np.zeros(len(f), bool)
    for start in range(len(f)):
        if seen[start]:
            continue
        seen[start] = True
        dq = deque([start])
        while dq:
            fi = dq.popleft()
            tri = f[fi]
            for s in range(3):
                a, b = tri[s], tri[(s + 1) % 3]
                for gj in e_to_f[(min(a, b), max(a, b))]:
                    if gj == fi or seen[gj]:
                        continue
                    g = f[gj]
                    # consistent neighbours traverse the shared edge in opposite directions
                    for t in range(3):
                        if g[t] == a and g[(t + 1) % 3] == b:
                            f[gj] = g[[0, 2, 1]]
                            break
                    seen[gj] = True
                    dq.append(gj)
    vol = np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum()
    if vol < 0:
        f = f[:, [0, 2, 1]]
    return f


def _split_longest(v, f, count, rng):
    """Insert ``count`` vertices by repeatedly bisecting a longest edge (ties
    broken at random) together with both incident triangles."""
    import heapq

    v = [np.asarray(x, float) for x in v]
    f = [list(t) for t in f]
    e_to_f = {}
    heap = []

    def push(a, b):
        key = (min(a, b), max(a, b))
        ln = float(np.linalg.norm(v[a] - v[b]))
        heapq.heappush(heap, (-round(ln, 9), float(rng.random()), key))

    for fi, tri in enumerate(f):
        for s in range(3):
            a, b = tri[s], tri[(s + 1) % 3]
            key = (min(a, b), max(a, b))
            if key not in e_to_f:
                push(a, b)
            e_to_f.setdefault(key, set()).add(fi)

    for _ in range(count):
        while True:
            _, _, key = heapq.heappop(heap)
            if key in e_to_f:
                break
        a, b = key
        mid = len(v)
        v.append(0.5 * (v[a] + v[b]))
        for fi in list(e_to_f.pop(key)):
            tri = f[fi]
            while {tri[0], tri[1]} != {a, b}:
                tri = tri[1:] + tri[:1]
            p, q, c = tri
            for x, y in ((q, c), (c, p)):
                e_to_f[(min(x, y), max(x, y))].discard(fi)
            new_a, new_b = [p, mid, c], [mid, q, c]
            f[fi] = new_a
            f.append(new_b)
            for fj, tri2 in ((fi, new_a), (len(f) - 1, new_b)):
                for s in range(3):
                    x, y = tri2[s], tri2[(s + 1) % 3]
                    k2 = (min(x, y), max(x, y))
                    if k2 not in e_to_f:
                        e_to_f[k2] = set()
                        push(x, y)
                    e_to_f[k2].add(fj)
    return np.asarray(v), np.asarray(f, np.int64)


def prototype_base(target_vertices: tuple[int, int] = (1675, 1680), seed: int = 0) -> TriangleMesh:
    """Defect-free toothed block with a vertex count drawn from the interval."""
    rng = np.random.default_rng(seed)
    target = int(rng.integers(target_vertices[0], target_vertices[1] + 1))
    occ = _prototype_voxels()
    v, f = None, None
    for sub in range(1, 8):
        v_try, f_try = _voxel_surface(occ, sub)
        if len(v_try) > target:
            break
        v, f = v_try, f_try
    if v is None:
        raise ValueError(f"target {target} below the coarsest lattice")
    f = _orient_by_volume(v, f)
    v, f = _split_longest(v, f, target - len(v), rng)
    return TriangleMesh(v * _VOXEL, f, part_id=f"proto-s{seed}")


def radius_for_count(mesh: TriangleMesh, center: int, count: int) -> float:
    """Radius whose ball around ``center`` holds exactly ``count`` vertices
    (midway between the count-th and next distance)."""
    d = np.sort(np.linalg.norm(mesh.vertices - mesh.vertices[center], axis=1))
    if count >= len(d):
        return float(d[-1] + 1.0)
    return float(0.5 * (d[count - 1] + d[count]))


def _resolve_center(mesh, center):
    if np.ndim(center) == 0:
        c = int(center)
        if not 0 <= c < mesh.n_vertices:
            raise DefectOutOfBounds(f"defect centre vertex {c} not in [0, {mesh.n_vertices})")
        return c
    p = np.asarray(center, float)
    d, c = cKDTree(mesh.vertices).query(p)
    if d > 2 * mesh.mean_edge_length:
        raise DefectOutOfBounds(f"defect centre {p.tolist()} is {d:.3g} away from the mesh")
    return int(c)


def apply_defect(mesh: TriangleMesh, defect: DefectSpec) -> tuple[TriangleMesh, GroundTruth]:
    c = _resolve_center(mesh, defect.center)
    v = np.array(mesh.vertices)
    dist = np.linalg.norm(v - v[c], axis=1)
    ids = np.flatnonzero(dist <= defect.radius)
    normals = mesh.vertex_normals
    if defect.kind == "protrusion":
        v[ids] += defect.magnitude * normals[ids]
    else:
        n = normals[c]
        plane = v[c] - defect.magnitude * n
        height = (v[ids] - plane) @ n
        v[ids] -= np.maximum(height, 0.0)[:, None] * n
    truth = GroundTruth(defect.kind, ids.tolist(), float(defect.magnitude), defect.seed)
    return mesh.with_vertices(v, part_id=f"{mesh.part_id}-{defect.kind}"), truth


def make_prototype(
    defect: DefectSpec | None = None,
    target_vertices: tuple[int, int] = (1675, 1680),
    seed: int = 0,
) -> tuple[TriangleMesh, GroundTruth]:
    """Toothed block stand-in for an additively manufactured part, optionally
    with a chip or protrusion. Returns the mesh and the defect vertex set."""
    base = prototype_base(target_vertices, seed)
    if defect is None:
        return base, GroundTruth(None, [], 0.0, seed)
    return apply_defect(base, defect)


def prototype_corner(mesh: TriangleMesh) -> int:
    """Index of the vertex at the block's (max x, max y, min z) corner."""
    v = mesh.vertices
    score = v[:, 0] + v[:, 1] - v[:, 2]
    return int(np.argmax(score))


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise.

    ``isotropic``: i.i.d. N(0, sigma^2) per coordinate. ``spatial``: per axis
    k, Cov(e_ik, e_jk) = sigma1_sq exp(-|p_ik - p_jk| / r_k) for i != j and
    sigma1_sq + sigma2_sq on the diagonal; axes independent.
    """

    kind: str = "isotropic"
    sigma: float = 0.05
    sigma1_sq: float | None = None
    sigma2_sq: float | None = None
    ranges: tuple[float, float, float] = (2.6, 2.6, 16.7)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("isotropic", "spatial"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def variances(self) -> tuple[float, float]:
        s2 = self.sigma ** 2
        s1 = s2 if self.sigma1_sq is None else self.sigma1_sq
        rest = s2 - s1 if self.sigma2_sq is None else self.sigma2_sq
        if s1 < 0 or rest < -1e-15:
            raise ValueError("noise variance split must be nonnegative")
        return s1, max(rest, 0.0)


def spatial_covariance(coord, sigma1_sq, sigma2_sq, corr_range):
    """Dense covariance along one axis for the given 1D coordinates."""
    c = np.asarray(coord, float)
    cov = sigma1_sq * np.exp(-np.abs(c[:, None] - c[None, :]) / corr_range)
    cov[np.diag_indices_from(cov)] = sigma1_sq + sigma2_sq
    return cov


def _cholesky(cov):
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(cov + 1e-10 * np.eye(len(cov)), lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationFailure("noise covariance is not positive definite") from exc


def add_noise(mesh: TriangleMesh, spec: NoiseSpec) -> TriangleMesh:
    """Return a copy of ``mesh`` with noise added to every vertex.

    Raises:
        ValidationError: spatial noise requested on more than 5000 vertices.
        FactorizationFailure: covariance not positive definite after one
            jittered retry.
    """
    if spec.sigma == 0 and spec.kind == "isotropic":
        return mesh.with_vertices(mesh.vertices)
    rng = np.random.default_rng(spec.seed)
    m = mesh.n_vertices
    if spec.kind == "isotropic":
        e = spec.sigma * rng.standard_normal((m, 3))
    else:
        if m > DENSE_NOISE_LIMIT:
            raise ValidationError(f"spatial noise limited to {DENSE_NOISE_LIMIT} vertices, got {m}")
        s1, s2 = spec.variances()
        e = np.empty((m, 3))
        for k in range(3):
            chol = _cholesky(spatial_covariance(mesh.vertices[:, k], s1, s2, spec.ranges[k]))
            e[:, k] = chol @ rng.standard_normal(m)
    return mesh.with_vertices(mesh.vertices + e)
