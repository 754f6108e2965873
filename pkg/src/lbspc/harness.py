"""Simulation banks for run-length experiments: per-part spectra and ICP
objectives computed once and resampled across replications."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .icp import NominalIndex, icp_register
from .laplacian import BandwidthPolicy, build_localized
from .mesh import TriangleMesh, loop_subdivide
from .partgen import CylinderSpec, DefectSpec, NoiseSpec, add_noise, apply_defect, make_cylinder, prototype_base
from .spectrum import lowest_spectrum


@dataclass(frozen=True)
class BankSpec:
    """Recipe for a bank of simulated parts.

    ``part`` is ``cylinder`` or ``prototype``. For prototypes ``defect`` may
    be ``chip`` or ``protrusion`` with ``defect_radius`` and
    ``defect_magnitude``; ``subdivide`` applies Loop levels after noise.
    """

    part: str = "cylinder"
    count: int = 100
    delta: float = 0.0
    noise: str = "isotropic"
    sigma: float = 0.05
    sigma1_sq: float | None = None
    ranges: tuple[float, float, float] = (2.6, 2.6, 16.7)
    k: int = 15
    seed: int = 0
    defect: str | None = None
    defect_count: int = 20
    defect_magnitude: float = 0.5
    subdivide: int = 0
    with_icp: bool = True
    nominal_vertices: int = 100_000

    def key(self) -> str:
        d = asdict(self)
        if not self.with_icp:
            del d["nominal_vertices"]
        return "-".join(f"{k}={d[k]}" for k in sorted(d)).replace(" ", "").replace("/", "_")


@dataclass
class PartBank:
    spectra: np.ndarray
    icp: np.ndarray | None
    vertex_counts: np.ndarray

    def save(self, path) -> None:
        np.savez(path, spectra=self.spectra, icp=np.array([]) if self.icp is None else self.icp,
                 vertex_counts=self.vertex_counts)

    @classmethod
    def load(cls, path) -> "PartBank":
        z = np.load(path)
        icp = z["icp"] if z["icp"].size else None
        return cls(z["spectra"], icp, z["vertex_counts"])


def cylinder_nominal(vertices: int = 100_000, seed: int = 12345) -> TriangleMesh:
    """Noise-free defect-free cylinder used as the ICP nominal.

    It stands in for the CAD model, so it is much finer than the parts:
    with a nominal as coarse as the parts, nearest-vertex distances are
    dominated by triangulation mismatch rather than by shape.
    """
    return make_cylinder(CylinderSpec(delta=0.0, target_vertices=(vertices, vertices + 5), seed=seed))


def simulate_part(spec: BankSpec, i: int) -> TriangleMesh:
    """The i-th part of a bank: geometry, optional defect, noise, subdivision."""
    seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
    if spec.part == "cylinder":
        mesh = make_cylinder(CylinderSpec(delta=spec.delta, seed=seed))
    elif spec.part == "prototype":
        mesh = prototype_base(seed=seed)
        if spec.defect:
            mesh, _ = apply_defect(mesh, prototype_defect(mesh, spec.defect, spec.defect_count,
                                                          spec.defect_magnitude))
    else:
        raise ValueError(f"unknown part kind {spec.part!r}")
    if spec.noise != "none" and spec.sigma > 0:
        mesh = add_noise(mesh, NoiseSpec(kind=spec.noise, sigma=spec.sigma, sigma1_sq=spec.sigma1_sq,
                                         ranges=spec.ranges, seed=seed + 1))
    if spec.subdivide:
        mesh = loop_subdivide(mesh, spec.subdivide)
    return mesh


def prototype_defect(mesh: TriangleMesh, kind: str, count: int, magnitude: float) -> DefectSpec:
    """Defect centred at a fixed feature: chips at a base corner,
    protrusions on the top edge of the first tooth."""
    from .partgen import prototype_corner, radius_for_count

    v = mesh.vertices
    if kind == "chip":
        c = prototype_corner(mesh)
    else:
        target = np.array([v[:, 0].min() + 6.0, v[:, 1].max(), v[:, 2].max()])
        c = int(np.argmin(np.linalg.norm(v - target, axis=1)))
    return DefectSpec(kind, c, radius_for_count(mesh, c, count), magnitude)


def build_bank(spec: BankSpec, nominal: TriangleMesh | None = None, cache_dir=None) -> PartBank:
    """Simulate ``spec.count`` parts and record their spectra and ICP
    objectives against ``nominal``. Results are cached as .npz when
    ``cache_dir`` is given."""
    path = None
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        import hashlib

        path = Path(cache_dir) / (hashlib.sha256(spec.key().encode()).hexdigest()[:20] + ".npz")
        if path.exists():
            return PartBank.load(path)
    index = None
    if spec.with_icp:
        index = NominalIndex(nominal if nominal is not None else cylinder_nominal(spec.nominal_vertices))
    spectra, objs, counts = [], [], []
    for i in range(spec.count):
        mesh = simulate_part(spec, i)
        pair = build_localized(mesh, BandwidthPolicy())
        spectra.append(lowest_spectrum(pair, spec.k, seed=i).eigenvalues)
        counts.append(mesh.n_vertices)
        if index is not None:
            objs.append(icp_register(mesh, index).objective)
    bank = PartBank(np.array(spectra), np.array(objs) if index is not None else None, np.array(counts))
    if path is not None:
        bank.save(path)
    return bank
