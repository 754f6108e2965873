from __future__ import annotations

import numpy as np
import pytest

from lbspc.mesh import TriangleMesh
from lbspc.partgen import CylinderSpec, make_cylinder, make_icosphere, prototype_base


def tetrahedron(edge: float = 1.0) -> TriangleMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)
    v *= edge / np.sqrt(8.0)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(v, f, part_id="tet")


def random_rigid(rng):
    from scipy.spatial.transform import Rotation

    return Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3) * 5


@pytest.fixture(scope="session")
def tet():
    return tetrahedron()


@pytest.fixture(scope="session")
def sphere162():
    return make_icosphere(2)


@pytest.fixture(scope="session")
def sphere642():
    return make_icosphere(3)


@pytest.fixture(scope="session")
def sphere2562():
    return make_icosphere(4)


@pytest.fixture(scope="session")
def small_cylinder():
    return make_cylinder(CylinderSpec(target_vertices=(250, 260), seed=4))


@pytest.fixture(scope="session")
def prototype():
    return prototype_base(seed=2)


@pytest.fixture(scope="session")
def generated_meshes(tet, sphere162, small_cylinder, prototype):
    """Every kind of generated mesh used across construction checks."""
    return {"tet": tet, "sphere162": sphere162, "cylinder": small_cylinder, "prototype": prototype}


@pytest.fixture(scope="session")
def bank_cache(request):
    return request.config.cache.mkdir("lbspc_banks")


# ---------------------------------------------------------------- simulated banks
# Banks are cached under the pytest cache directory, so only the first run pays
# for the simulation. Every recipe has its own seed.

BANKS = {
    "ic": dict(count=600, k=100, seed=101),
    "delta1": dict(count=200, delta=1.0, seed=102),
    "delta0005": dict(count=300, delta=0.005, seed=103),
    "delta2": dict(count=60, delta=2.0, seed=111),
    "delta05": dict(count=60, delta=0.5, seed=104, with_icp=False),
    "delta00005": dict(count=200, delta=0.0005, k=100, seed=105, with_icp=False),
    "spatial_ic": dict(count=200, noise="spatial", sigma1_sq=0.05 ** 2, seed=106),
    "spatial_delta1": dict(count=200, delta=1.0, noise="spatial", sigma1_sq=0.05 ** 2, seed=107),
    # prototype blocks after one Loop level (~6700 vertices); defects sized in units of sigma = 0.05
    "proto_ic": dict(part="prototype", count=200, subdivide=1, seed=108, with_icp=False),
    "proto_protrusion": dict(part="prototype", count=100, subdivide=1, seed=109, defect="protrusion",
                             defect_magnitude=0.5, with_icp=False),
    "proto_chip": dict(part="prototype", count=200, subdivide=1, seed=110, defect="chip",
                       defect_magnitude=0.25, with_icp=False),
}


@pytest.fixture(scope="session")
def banks(bank_cache):
    from lbspc.harness import BankSpec, build_bank

    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = build_bank(BankSpec(**BANKS[name]), cache_dir=bank_cache)
        return cache[name]

    return get
