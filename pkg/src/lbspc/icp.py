"""Rigid ICP registration against a nominal mesh, and per-vertex deviations."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometry, ValidationError
from .mesh import TriangleMesh, write_ply


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    objective: float
    matches: np.ndarray
    distances: np.ndarray
    iterations: int
    converged: bool
    history: np.ndarray


@dataclass(frozen=True, eq=False)
class DeviationMap:
    deviation: np.ndarray
    part_id: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex_id", "deviation"])
            for i, d in enumerate(self.deviation):
                w.writerow([i, repr(float(d))])

    def to_ply(self, mesh: TriangleMesh, path) -> None:
        write_ply(mesh, path, {"deviation": self.deviation})

    def top(self, count: int) -> np.ndarray:
        return np.argsort(-self.deviation, kind="stable")[:count]


class NominalIndex:
    """Spatial index over the nominal vertices, built once and shared."""

    def __init__(self, nominal: TriangleMesh):
        self.mesh = nominal
        self.points = nominal.vertices
        self.tree = cKDTree(nominal.vertices)

    def query(self, pts):
        d, idx = self.tree.query(pts)
        return d, idx


def procrustes(src, dst, weights=None) -> RigidTransform:
    """Rotation and translation minimizing sum w_i ||R src_i + t - dst_i||^2,
    reflections excluded (unit weights when ``weights`` is None).

    Raises:
        DegenerateGeometry: the centred cross-covariance has rank < 2.
    """
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[0] == 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateGeometry("cross-covariance is rank deficient (collinear points)")
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cd - rot @ cs)


def _register_from(pts, index, init, max_iters, tol):
    current = init
    d, idx = index.query(current.apply(pts))
    obj = float(d.sum())
    history = [obj]
    converged = obj == 0.0
    it = 0
    floor = 1e-12 * max(float(np.ptp(index.points, axis=0).max()), 1e-300)
    while not converged and it < max_iters:
        it += 1
        # weights 1/d turn the squared fit into a majorizer of the summed
        # distances (d' <= d'^2 / 2d + d / 2), so the objective cannot rise
        candidate = procrustes(pts, index.points[idx], 1.0 / np.maximum(d, floor))
        d_new, idx_new = index.query(candidate.apply(pts))
        obj_new = float(d_new.sum())
        if obj_new > obj:
            # only reachable through rounding once the fit has stalled
            converged = True
            break
        decrease = obj - obj_new
        current, d, idx, obj = candidate, d_new, idx_new, obj_new
        history.append(obj)
        if obj == 0.0 or decrease <= tol * max(obj, 1e-300):
            converged = True
    return current, obj, idx, d, it, converged, np.asarray(history)


def icp_register(
    query: TriangleMesh,
    nominal: TriangleMesh | NominalIndex,
    max_iters: int = 100,
    tol: float = 1e-12,
    restarts: int = 1,
    seed: int = 0,
) -> RegistrationResult:
    """Iterative closest point: nearest-vertex matching alternated with the
    closed-form Procrustes step.

    Starts from centroid alignment with identity rotation; with
    ``restarts`` > 1, additional random initial rotations are tried and the
    lowest objective is kept. The reported objective is the sum of matched
    distances.
    """
    index = nominal if isinstance(nominal, NominalIndex) else NominalIndex(nominal)
    pts = np.asarray(getattr(query, "vertices", query), float)
    if len(pts) == 0 or len(index.points) == 0:
        raise ValidationError("empty point set")
    cq, cn = pts.mean(axis=0), index.points.mean(axis=0)
    inits = [RigidTransform(np.eye(3), cn - cq)]
    if restarts > 1:
        rots = Rotation.random(restarts - 1, random_state=seed).as_matrix()
        inits += [RigidTransform(r, cn - r @ cq) for r in rots]
    best = None
    for init in inits:
        out = _register_from(pts, index, init, max_iters, tol)
        if best is None or out[1] < best[1]:
            best = out
    tr, obj, idx, d, _, conv, hist = best
    # iterations counts accepted matching rounds, the initial one included
    return RegistrationResult(tr, obj, idx, d, len(hist), conv, hist)


def deviation_map(result: RegistrationResult, query: TriangleMesh, nominal: TriangleMesh) -> DeviationMap:
    """Distance from each registered query vertex to its matched nominal vertex."""
    moved = result.transform.apply(query.vertices)
    dev = np.linalg.norm(moved - nominal.vertices[result.matches], axis=1)
    return DeviationMap(dev, getattr(query, "part_id", ""))


def icp_objective_stream(nominal: TriangleMesh, parts, **kwargs) -> np.ndarray:
    """Final ICP objective of every part against the nominal."""
    parts = list(parts)
    if not parts:
        raise ValidationError("no parts given")
    index = NominalIndex(nominal)
    return np.array([icp_register(p, index, **kwargs).objective for p in parts])
