"""Spectral distances built from truncated eigen-expansions (diagnostics)."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .spectrum import SpectralSignature

ZERO_EIG = 1e-8


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Eigenvalues and B-orthonormal eigenvectors (columns) of one mesh."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mesh: object = None

    @classmethod
    def from_signature(cls, sig: SpectralSignature, mesh=None) -> "SpectralBasis":
        if sig.eigenvectors is None:
            raise ValueError("signature carries no eigenvectors")
        return cls(np.asarray(sig.eigenvalues), np.asarray(sig.eigenvectors), mesh)

    def truncated(self, k: int) -> "SpectralBasis":
        return SpectralBasis(self.eigenvalues[:k], self.eigenvectors[:, :k], self.mesh)

    @property
    def nonzero(self) -> np.ndarray:
        """Mask of eigenvalues kept in 1/lambda sums."""
        lam = self.eigenvalues
        return lam >= ZERO_EIG * lam[-1]


def _check_t(t):
    if not t > 0:
        raise ValueError("t must be positive")


def heat_kernel(basis: SpectralBasis, i, j, t: float):
    """k_t(i, j) = sum exp(-lambda t) phi(i) phi(j); i and j may be arrays."""
    _check_t(t)
    e = np.exp(-basis.eigenvalues * t)
    phi = basis.eigenvectors
    return np.sum(e * (phi[i] * phi[j]), axis=-1)


def diffusion_distance(basis: SpectralBasis, i, j, t: float):
    _check_t(t)
    e = np.exp(-basis.eigenvalues * t)
    diff = basis.eigenvectors[i] - basis.eigenvectors[j]
    return np.sqrt(np.sum(e * diff * diff, axis=-1))


def gps_commute_biharmonic(basis: SpectralBasis, i, j):
    """(G(i, j), commute-time distance, biharmonic distance) with
    near-zero eigenvalues skipped."""
    keep = basis.nonzero
    lam = basis.eigenvalues[keep]
    phi = basis.eigenvectors[:, keep]
    g = np.sum((phi[i] * phi[j]) / lam, axis=-1)
    diff = phi[i] - phi[j]
    dc = np.sqrt(np.sum(diff * diff / lam, axis=-1))
    db = np.sqrt(np.sum(diff * diff / lam ** 2, axis=-1))
    return g, dc, db


def heat_kernel_values(basis: SpectralBasis, t: float, pairs=None, rng=None, count: int = 10000):
    """Heat-kernel values over vertex pairs (random pairs if none given)."""
    if pairs is None:
        rng = np.random.default_rng(rng)
        m = basis.eigenvectors.shape[0]
        pairs = rng.integers(0, m, size=(count, 2))
    pairs = np.asarray(pairs)
    return heat_kernel(basis, pairs[:, 0], pairs[:, 1], t)


def heat_kernel_profile(basis: SpectralBasis, source: int, t: float):
    """k_t(source, j) for every vertex j."""
    m = basis.eigenvectors.shape[0]
    return heat_kernel(basis, np.full(m, source), np.arange(m), t)


def qq_table(sample_a, sample_b, step: float = 0.01) -> np.ndarray:
    """(quantile, value_a, value_b) rows on a regular probability grid."""
    a = np.asarray(sample_a, float).ravel()
    b = np.asarray(sample_b, float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("Q-Q comparison needs two nonempty samples")
    q = np.round(np.arange(0.0, 1.0 + step / 2, step), 10)
    return np.column_stack([q, np.quantile(a, q), np.quantile(b, q)])


def qq_export(sample_a, sample_b, path=None, step: float = 0.01) -> np.ndarray:
    """Q-Q table, optionally written as CSV (quantile,value_a,value_b)."""
    table = qq_table(sample_a, sample_b, step)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantile", "value_a", "value_b"])
            for row in table:
                w.writerow([f"{row[0]:.2f}", repr(float(row[1])), repr(float(row[2]))])
    return table
