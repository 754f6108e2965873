from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from lbspc.dfewma import ChartConfig, PoolScenario, run_length_experiment
from lbspc.errors import DegenerateGeometry, ValidationError
from lbspc.harness import BankSpec, cylinder_nominal, prototype_defect, simulate_part
from lbspc.icp import (
    NominalIndex,
    RigidTransform,
    deviation_map,
    icp_objective_stream,
    icp_register,
    procrustes,
)
from lbspc.partgen import CylinderSpec, NoiseSpec, add_noise, apply_defect, make_cylinder

from conftest import random_rigid


@pytest.fixture(scope="module")
def nominal_cylinder():
    return cylinder_nominal()


def test_exact_copy(prototype):
    res = icp_register(prototype, prototype)
    assert res.objective <= 1e-6
    assert res.iterations == 1 and res.converged
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(res.transform.translation, 0, atol=1e-12)
    assert np.all(deviation_map(res, prototype, prototype).deviation <= 1e-9)


def test_recovers_known_motion(prototype):
    rot = Rotation.from_euler("z", 15, degrees=True).as_matrix()
    motion = RigidTransform(rot, np.array([1.0, 2.0, 3.0]))
    query = prototype.with_vertices(motion.apply(prototype.vertices))
    res = icp_register(query, prototype)
    comp = res.transform.compose(motion)
    assert np.max(np.abs(comp.rotation - np.eye(3))) <= 1e-6
    assert np.max(np.abs(comp.translation)) <= 1e-6
    assert res.objective <= 1e-6
    assert np.array_equal(res.matches, np.arange(prototype.n_vertices))


def test_transform_is_proper_rotation(prototype):
    query = add_noise(prototype, NoiseSpec(sigma=0.05, seed=1))
    r = icp_register(query, prototype).transform.rotation
    assert np.linalg.norm(r.T @ r - np.eye(3)) <= 1e-10
    assert abs(np.linalg.det(r) - 1) <= 1e-10


def test_rigid_transform_algebra():
    rng = np.random.default_rng(0)
    a = RigidTransform(*random_rigid(rng))
    b = RigidTransform(*random_rigid(rng))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)


def test_noisy_copy_stable_over_poses():
    # near-nominal starting poses; the cylinder's rotational symmetry makes
    # lattice-shifted alignments local minima farther out
    nominal = make_cylinder(CylinderSpec(seed=4))
    query = add_noise(nominal, NoiseSpec(sigma=0.05, seed=2))
    # expected nearest-point residual at the true pose
    expected = NominalIndex(nominal).query(query.vertices)[0].mean()
    rng = np.random.default_rng(3)
    objs = []
    for _ in range(10):
        axis = rng.normal(size=3)
        rot = Rotation.from_rotvec(np.deg2rad(3) * axis / np.linalg.norm(axis)).as_matrix()
        moved = query.transformed(rot, rng.normal(scale=0.5, size=3))
        objs.append(icp_register(moved, nominal).objective)
    objs = np.array(objs) / query.n_vertices
    assert objs.max() <= 1.05 * objs.min()
    assert abs(objs.mean() - expected) <= 0.05 * expected


def test_objective_history_monotone(nominal_cylinder):
    for i in range(5):
        part = simulate_part(BankSpec(delta=1.0, seed=21), i)
        res = icp_register(part.transformed(*random_rigid(np.random.default_rng(i))), nominal_cylinder,
                           restarts=3, seed=i)
        assert np.all(np.diff(res.history) <= 1e-12)
        assert res.objective == res.history[-1]
        assert len(res.matches) == part.n_vertices


def test_procrustes_optimal_against_perturbations():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(200, 3))
    rot, t = random_rigid(rng)
    dst = src @ rot.T + t + rng.normal(scale=0.1, size=src.shape)
    best = procrustes(src, dst)
    cost = lambda tr: np.sum((tr.apply(src) - dst) ** 2)
    c0 = cost(best)
    for _ in range(100):
        d_rot = Rotation.from_rotvec(rng.normal(scale=0.01, size=3)).as_matrix()
        trial = RigidTransform(d_rot @ best.rotation, best.translation + rng.normal(scale=0.01, size=3))
        assert cost(trial) >= c0


def test_weighted_procrustes_optimal():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(100, 3))
    dst = src @ random_rigid(rng)[0].T + rng.normal(scale=0.2, size=src.shape)
    w = rng.uniform(0.1, 3.0, size=100)
    best = procrustes(src, dst, w)
    cost = lambda tr: np.sum(w * np.sum((tr.apply(src) - dst) ** 2, axis=1))
    c0 = cost(best)
    for _ in range(100):
        d_rot = Rotation.from_rotvec(rng.normal(scale=0.01, size=3)).as_matrix()
        trial = RigidTransform(d_rot @ best.rotation, best.translation + rng.normal(scale=0.01, size=3))
        assert cost(trial) >= c0


def test_procrustes_rejects_reflection():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(50, 3))
    dst = src * np.array([1, 1, -1])
    tr = procrustes(src, dst)
    assert np.linalg.det(tr.rotation) == pytest.approx(1.0)


def test_degenerate_geometry():
    line = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry):
        procrustes(line, line + 1)


def test_protrusion_localized(prototype):
    defect = prototype_defect(prototype, "protrusion", 20, 0.5)
    part, truth = apply_defect(prototype, defect)
    part = add_noise(part, NoiseSpec(sigma=0.05, seed=6))
    res = icp_register(part, prototype)
    dev = deviation_map(res, part, prototype)
    top = dev.top(20)
    assert np.isin(top, truth.vertex_ids).mean() >= 0.9
    # a 20-vertex ball on this mesh is about 7 mm across
    assert pdist(part.vertices[top]).max() < 10.0


def test_deviations_invariant_to_common_motion(prototype):
    part, _ = apply_defect(prototype, prototype_defect(prototype, "protrusion", 20, 0.5))
    part = add_noise(part, NoiseSpec(sigma=0.05, seed=7))
    rot = Rotation.from_rotvec([0.1, -0.2, 0.15]).as_matrix()
    a = deviation_map(icp_register(part, prototype), part, prototype).deviation
    moved = part.transformed(rot, np.array([3.0, -1.0, 2.0]))
    b = deviation_map(icp_register(moved, prototype), moved, prototype).deviation
    assert np.max(np.abs(a - b)) <= 1e-6


def test_barrel_deviation_not_localized(nominal_cylinder):
    spreads = []
    for i in range(3):
        part = simulate_part(BankSpec(delta=0.5, seed=22), i)
        dev = deviation_map(icp_register(part, nominal_cylinder), part, nominal_cylinder)
        spreads.append(pdist(part.vertices[dev.top(20)]).max())
    # a localized defect keeps its top vertices within a few mm; here they span the part
    assert min(spreads) > 20.0


def test_deviation_exports(tmp_path, prototype):
    res = icp_register(prototype, prototype)
    dev = deviation_map(res, prototype, prototype)
    dev.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "vertex_id,deviation" and len(lines) == prototype.n_vertices + 1
    dev.to_ply(prototype, tmp_path / "d.ply")
    assert "property double deviation" in (tmp_path / "d.ply").read_text()


def test_objective_stream(nominal_cylinder):
    parts = [simulate_part(BankSpec(seed=23), i) for i in range(3)]
    series = icp_objective_stream(nominal_cylinder, parts)
    assert series.shape == (3,)
    assert series[1] == icp_register(parts[1], nominal_cylinder).objective
    with pytest.raises(ValidationError):
        icp_objective_stream(nominal_cylinder, [])


def test_objective_chart_flags_strong_barrel(banks):
    # one-dimensional chart on the ICP objective; the earliest possible alarm is the second part
    rep = run_length_experiment(PoolScenario(banks("ic").icp, banks("delta2").icp),
                                ChartConfig(alpha=0.005, p=1), 200, seed=5)
    assert 2 <= rep.arl <= 2.5
