"""Lowest eigenpairs of B^-1 L and spectrum-level descriptors."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, sparse

from .errors import ConvergenceFailure, InsufficientSpectrum
from .laplacian import LaplacianPair, symmetrize

DENSE_FALLBACK = 2000


@dataclass(frozen=True, eq=False)
class SpectralSignature:
    """Ascending lowest eigenvalues of one part, with optional eigenvectors
    (columns, B-orthonormal)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = None
    part_id: str = ""
    normalized: bool = False

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    def head(self, p: int) -> np.ndarray:
        return self.eigenvalues[:p]


def gershgorin_bound(s: sparse.spmatrix) -> float:
    a = abs(s).tocsr()
    return float(np.asarray(a.sum(axis=1)).max())


def _orth_against(x, basis):
    # classical Gram-Schmidt applied twice
    if basis is not None and basis.shape[1]:
        x = x - basis @ (basis.T @ x)
        x = x - basis @ (basis.T @ x)
    return x


def _lanczos_largest(a, k, block, seed, tol, max_dim, max_restarts):
    """Thick-restart block Lanczos with full reorthogonalization for the k
    largest eigenpairs of the symmetric operator ``a``.

    Returns Ritz values (descending), Ritz vectors and residual norms.
    """
    m = a.shape[0]
    rng = np.random.default_rng(seed)
    anorm = max(gershgorin_bound(a), 1e-300)
    v = np.empty((m, 0))
    av = np.empty((m, 0))
    q, _ = np.linalg.qr(rng.standard_normal((m, block)))
    keep = min(max_dim - block, k + block)
    resid = None
    for _ in range(max_restarts):
        while True:
            aq = a @ q
            v = np.hstack([v, q])
            av = np.hstack([av, aq])
            if v.shape[1] + block > max_dim:
                break
            nxt = _orth_against(aq, v)
            q, r = np.linalg.qr(nxt)
            # broken-down directions are replaced by fresh random ones
            weak = np.abs(np.diag(r)) < 1e-10 * anorm
            if weak.any():
                fresh = _orth_against(rng.standard_normal((m, int(weak.sum()))), v)
                q[:, weak] = fresh
                q = _orth_against(q, v)
                q, _ = np.linalg.qr(q)
        h = v.T @ av
        h = 0.5 * (h + h.T)
        theta, y = linalg.eigh(h)
        order = np.argsort(theta)[::-1]
        theta, y = theta[order], y[:, order]
        x = v @ y[:, :keep]
        ax = av @ y[:, :keep]
        res = ax - x * theta[:keep]
        resid = np.linalg.norm(res[:, :k], axis=0)
        if np.all(resid <= tol * anorm):
            return theta[:k], x[:, :k], resid
        # thick restart: keep leading Ritz pairs, continue from the residual block
        nxt = _orth_against(res[:, :keep], x)
        u, sv, _ = np.linalg.svd(nxt, full_matrices=False)
        q = u[:, :block]
        if sv[0] < 1e-14 * anorm:
            return theta[:k], x[:, :k], resid
        q = _orth_against(q, x)
        q, _ = np.linalg.qr(q)
        v, av = x, ax
    raise ConvergenceFailure(
        f"Lanczos did not converge after {max_restarts} restarts", residuals=resid
    )


def _dense_lowest(s, k):
    vals, vecs = linalg.eigh(s.toarray(), subset_by_index=[0, k - 1])
    return vals, vecs


def lowest_spectrum(
    pair: LaplacianPair,
    k: int = 15,
    want_vectors: bool = False,
    method: str = "auto",
    seed: int = 0,
    tol: float = 1e-10,
    max_restarts: int = 500,
    part_id: str = "",
) -> SpectralSignature:
    """The k smallest eigenvalues of B^-1 L.

    The symmetric form S = B^-1/2 L B^-1/2 is shifted to sigma I - S, with
    sigma a Gershgorin bound, so the wanted eigenvalues become the largest
    ones, which block Lanczos finds without any linear solves. Eigenvalues
    are then re-evaluated as Rayleigh quotients on S, and eigenvectors are
    mapped back by phi = B^-1/2 psi.

    Args:
        method: ``"lanczos"``, ``"dense"``, or ``"auto"`` (dense for tiny
            problems, Lanczos otherwise with dense fallback up to 2000
            vertices).

    Raises:
        ConvergenceFailure: the restart cap was hit (with residuals).
    """
    m = pair.size
    if not 1 <= k < m:
        raise ValueError(f"need 1 <= k < m, got k={k}, m={m}")
    s = symmetrize(pair)
    block = min(k, 8)
    max_dim = min(m, max(2 * k + 2 * block, k + 6 * block, 128))
    if method == "auto":
        method = "dense" if m <= 3 * max_dim else "lanczos"
    if method == "dense":
        vals, psi = _dense_lowest(s, k)
    elif method == "lanczos":
        sigma = gershgorin_bound(s)
        a = sparse.identity(m, format="csr") * sigma - s
        try:
            _, psi, _ = _lanczos_largest(a, k, block, seed, tol, max_dim, max_restarts)
        except ConvergenceFailure:
            if m > DENSE_FALLBACK:
                raise
            vals, psi = _dense_lowest(s, k)
        else:
            vals = np.einsum("ij,ij->j", psi, s @ psi)
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(vals, kind="stable")
    vals, psi = vals[order], psi[:, order]
    vecs = None
    if want_vectors:
        # deterministic sign: largest-magnitude entry positive
        idx = np.argmax(np.abs(psi), axis=0)
        psi = psi * np.sign(psi[idx, np.arange(k)])
        vecs = psi / np.sqrt(pair.mass)[:, None]
    return SpectralSignature(np.asarray(vals, dtype=float), vecs, part_id=part_id)


def weyl_area_estimate(sig: SpectralSignature, fit_range: tuple[int, int] | None = None) -> float:
    """Surface area from the asymptotic slope b of lambda_i against i: 4 pi / b.

    ``fit_range`` is an inclusive 1-based index interval, default the upper
    half of the spectrum.
    """
    k = sig.k
    lo, hi = fit_range if fit_range is not None else (max(2, k // 2), k)
    if lo < 1 or hi > k or hi < lo:
        raise ValueError(f"fit range ({lo}, {hi}) outside [1, {k}]")
    if hi - lo + 1 < 10:
        raise InsufficientSpectrum(f"fit range ({lo}, {hi}) has fewer than 10 points")
    i = np.arange(lo, hi + 1, dtype=float)
    slope = np.polyfit(i, sig.eigenvalues[lo - 1:hi], 1)[0]
    if not slope > 0:
        raise InsufficientSpectrum(f"non-positive spectral slope {slope:g}")
    return float(4.0 * np.pi / slope)


def normalize_spectrum(sig: SpectralSignature, area: float) -> SpectralSignature:
    """Scale eigenvalues by area / (4 pi), making spectra size-free."""
    if not area > 0:
        raise ValueError("area must be positive")
    return replace(sig, eigenvalues=sig.eigenvalues * (area / (4.0 * np.pi)), normalized=True)


def write_spectra_csv(signatures, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["part_id", "index", "eigenvalue"])
        for sig in signatures:
            for i, lam in enumerate(sig.eigenvalues, start=1):
                w.writerow([sig.part_id, i, repr(float(lam))])


def read_spectra_csv(path) -> list[SpectralSignature]:
    """Inverse of :func:`write_spectra_csv`; parts keep file order."""
    parts: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parts.setdefault(row["part_id"], []).append((int(row["index"]), float(row["eigenvalue"])))
    out = []
    for pid, rows in parts.items():
        rows.sort()
        out.append(SpectralSignature(np.array([v for _, v in rows]), part_id=pid))
    return out
