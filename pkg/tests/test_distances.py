from __future__ import annotations

import numpy as np
import pytest

from lbspc.distances import (
    SpectralBasis,
    diffusion_distance,
    gps_commute_biharmonic,
    heat_kernel,
    heat_kernel_profile,
    heat_kernel_values,
    qq_export,
    qq_table,
)
from lbspc.harness import prototype_defect
from lbspc.laplacian import build_localized
from lbspc.partgen import NoiseSpec, add_noise, apply_defect
from lbspc.spectrum import lowest_spectrum

from conftest import random_rigid


def make_basis(mesh, k):
    return SpectralBasis.from_signature(lowest_spectrum(build_localized(mesh), k, want_vectors=True), mesh)


@pytest.fixture(scope="module")
def sphere_basis(sphere642):
    # 49 = 1 + 3 + ... + 13 closes the l <= 6 harmonic bands
    return make_basis(sphere642, 49)


@pytest.fixture(scope="module")
def part_basis(prototype):
    return make_basis(add_noise(prototype, NoiseSpec(seed=1)), 50)


def pairs(rng, m, n=1000):
    return rng.integers(0, m, size=n), rng.integers(0, m, size=n)


def test_basis_is_mass_orthonormal(sphere642, sphere_basis):
    pair = build_localized(sphere642)
    phi = sphere_basis.eigenvectors
    gram = phi.T @ (pair.mass[:, None] * phi)
    assert np.max(np.abs(gram - np.eye(phi.shape[1]))) <= 1e-8


def test_heat_kernel_symmetric(part_basis):
    i, j = pairs(np.random.default_rng(0), part_basis.eigenvectors.shape[0])
    for t in (1.0, 100.0):
        assert np.array_equal(heat_kernel(part_basis, i, j, t), heat_kernel(part_basis, j, i, t))
        g = gps_commute_biharmonic(part_basis, i, j)
        assert all(np.array_equal(a, b) for a, b in zip(g, gps_commute_biharmonic(part_basis, j, i)))


def test_heat_kernel_steady_state(sphere642, sphere_basis):
    # only the constant mode survives: phi_1 = 1 / sqrt(sum B_ii), and the
    # one-ring masses count every triangle three times
    i, j = pairs(np.random.default_rng(1), sphere642.n_vertices)
    k = heat_kernel(sphere_basis, i, j, 1e4)
    np.testing.assert_allclose(k, 1 / (3 * sphere642.area), rtol=1e-9)
    phi1 = sphere_basis.eigenvectors[:, 0]
    np.testing.assert_allclose(k, phi1[i] * phi1[j], rtol=1e-9)


def test_heat_concentrates_at_source(sphere642, sphere_basis):
    m = sphere642.n_vertices
    idx = np.arange(m)
    for t in (1e-3, 1e-2, 0.1, 1.0, 10.0):
        k = heat_kernel(sphere_basis, np.repeat(idx, m), np.tile(idx, m), t).reshape(m, m)
        assert np.all(np.diag(k)[:, None] - k >= -1e-12)


def test_heat_kernel_rejects_nonpositive_time(sphere_basis):
    with pytest.raises(ValueError):
        heat_kernel(sphere_basis, 0, 1, 0.0)
    with pytest.raises(ValueError):
        diffusion_distance(sphere_basis, 0, 1, -1.0)


def test_diffusion_identity(part_basis):
    i, j = pairs(np.random.default_rng(2), part_basis.eigenvectors.shape[0])
    for t in (10.0, 100.0):
        d2 = diffusion_distance(part_basis, i, j, t) ** 2
        k = lambda a, b: heat_kernel(part_basis, a, b, t)
        np.testing.assert_allclose(d2, k(i, i) + k(j, j) - 2 * k(i, j), rtol=0,
                                   atol=1e-12 * np.max(k(i, i)))
    assert np.all(diffusion_distance(part_basis, i, i, 10.0) == 0)


def test_diffusion_triangle_inequality(part_basis):
    rng = np.random.default_rng(3)
    m = part_basis.eigenvectors.shape[0]
    a, b, c = (rng.integers(0, m, size=1000) for _ in range(3))
    d = lambda x, y: diffusion_distance(part_basis, x, y, 50.0)
    assert np.all(d(a, c) <= d(a, b) + d(b, c) + 1e-15)
    assert np.array_equal(d(a, b), d(b, a))


def test_commute_identity_and_zero_diagonal(part_basis):
    i, j = pairs(np.random.default_rng(4), part_basis.eigenvectors.shape[0])
    g = lambda a, b: gps_commute_biharmonic(part_basis, a, b)[0]
    _, dc, db = gps_commute_biharmonic(part_basis, i, j)
    scale = np.max(np.abs(g(i, i)))
    np.testing.assert_allclose(dc ** 2, g(i, i) + g(j, j) - 2 * g(i, j), rtol=0, atol=1e-12 * scale)
    assert np.all(gps_commute_biharmonic(part_basis, i, i)[2] == 0)
    assert np.all(db >= 0)


def test_constant_mode_skipped(part_basis):
    assert not part_basis.nonzero[0] and part_basis.nonzero[1:].all()


def test_biharmonic_antipodal_maximum(sphere642, sphere_basis):
    v = sphere642.vertices
    anti = np.array([np.argmin(np.linalg.norm(v + x, axis=1)) for x in v])
    assert np.allclose(v[anti], -v, atol=1e-12)
    idx = np.arange(len(v))
    for i in range(0, len(v), 5):
        db = gps_commute_biharmonic(sphere_basis, np.full(len(v), i), idx)[2]
        assert db[anti[i]] >= db.max() * (1 - 1e-12)


def test_truncation_monotone(part_basis):
    i, j = pairs(np.random.default_rng(5), part_basis.eigenvectors.shape[0])
    prev = None
    for k in (5, 10, 20, 35, 50):
        b = part_basis.truncated(k)
        cur = np.stack([diffusion_distance(b, i, j, 20.0), *gps_commute_biharmonic(b, i, j)[1:]])
        if prev is not None:
            assert np.all(cur >= prev)
        prev = cur


def test_rigid_invariance(prototype):
    part = add_noise(prototype, NoiseSpec(seed=2))
    rot, t = random_rigid(np.random.default_rng(6))
    a = make_basis(part, 30)
    b = make_basis(part.transformed(rot, t), 30)
    i, j = pairs(np.random.default_rng(7), part.n_vertices)
    # heat and diffusion values do not depend on eigenvector signs or rotations within eigenspaces
    for fn in (lambda x: heat_kernel(x, i, j, 50.0), lambda x: diffusion_distance(x, i, j, 50.0),
               lambda x: gps_commute_biharmonic(x, i, j)[1], lambda x: gps_commute_biharmonic(x, i, j)[2]):
        va, vb = fn(a), fn(b)
        assert np.max(np.abs(va - vb)) <= 1e-6 * np.max(np.abs(va))


def test_qq_identical_on_diagonal(tmp_path):
    x = np.random.default_rng(8).normal(size=500)
    table = qq_export(x, x.copy(), tmp_path / "qq.csv")
    assert table.shape == (101, 3)
    assert np.array_equal(table[:, 1], table[:, 2])
    lines = (tmp_path / "qq.csv").read_text().splitlines()
    assert lines[0] == "quantile,value_a,value_b" and lines[1].startswith("0.00,") and len(lines) == 102


def test_qq_rejects_empty():
    with pytest.raises(ValueError):
        qq_table([], [1.0])
    with pytest.raises(ValueError):
        qq_export([1.0], np.array([]))


def test_heat_values_sampling_reproducible(part_basis):
    a = heat_kernel_values(part_basis, 100.0, rng=3, count=200)
    b = heat_kernel_values(part_basis, 100.0, rng=3, count=200)
    assert a.shape == (200,) and np.array_equal(a, b)


def test_protrusion_departs_from_diagonal(prototype):
    # heat spreading from a point on the defect, t = 100
    spec = prototype_defect(prototype, "protrusion", 20, 0.5)
    defective, truth = apply_defect(prototype, spec)
    src = truth.vertex_ids[0]
    ic = [make_basis(add_noise(prototype, NoiseSpec(seed=s)), 50) for s in (11, 12, 13)]
    oc = make_basis(add_noise(defective, NoiseSpec(seed=14)), 50)
    prof = lambda b: heat_kernel_profile(b, src, 100.0)

    def gap(x, y):
        t = qq_table(prof(x), prof(y))
        return np.max(np.abs(t[:, 1] - t[:, 2]))

    ic_gap = max(gap(ic[0], ic[1]), gap(ic[0], ic[2]))
    assert gap(ic[0], oc) > 3 * ic_gap
