"""Two-sample permutation tests on groups of spectra: max-t and the sum of
squared standardized rank sums."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError, ZeroVariance

EXACT_LIMIT = 200_000
DEFAULT_BUDGET = 10_000
_CHUNK = 20_000


@dataclass(frozen=True, eq=False)
class PermutationTestResult:
    statistic: float
    p_value: float
    permutations: int
    mode: str
    null_distribution: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "permutations": self.permutations,
            "mode": self.mode,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)

    def write_null_csv(self, path) -> None:
        if self.null_distribution is None:
            raise ValueError("null distribution was not kept")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["statistic"])
            for v in self.null_distribution:
                w.writerow([repr(float(v))])


def stack_spectra(sample, p: int | None = None) -> np.ndarray:
    """Rows of eigenvalues from signatures or arrays; all must share k and
    the normalized flag. ``p`` keeps only the leading p values."""
    sample = list(sample)
    if not sample:
        raise ValidationError("empty sample")
    flags = {getattr(s, "normalized", None) for s in sample}
    if len(flags) > 1:
        raise ValidationError("sample mixes normalized and unnormalized spectra")
    rows = [np.asarray(getattr(s, "eigenvalues", s), dtype=float) for s in sample]
    ks = {len(r) for r in rows}
    if len(ks) != 1:
        raise ValidationError(f"spectra have differing lengths {sorted(ks)}")
    x = np.vstack(rows)
    return x if p is None else x[:, :p]


def _labelings(m, n, budget, seed, exact_limit):
    """Yield boolean blocks (P, m+n) marking group-a membership. The first
    row of the first block is always the observed labelling."""
    total = m + n
    count = math.comb(total, m)
    if count <= exact_limit:
        def gen():
            it = itertools.combinations(range(total), m)
            while True:
                chunk = list(itertools.islice(it, _CHUNK))
                if not chunk:
                    return
                mask = np.zeros((len(chunk), total), bool)
                rows = np.repeat(np.arange(len(chunk)), m)
                mask[rows, np.asarray(chunk).ravel()] = True
                yield mask
        # combinations start with (0..m-1), which is the observed labelling
        return gen(), count, "exact"
    rng = np.random.default_rng(seed)

    def gen_mc():
        ident = np.zeros((1, total), bool)
        ident[0, :m] = True
        yield ident
        done = 0
        while done < budget:
            b = min(_CHUNK, budget - done)
            keys = rng.random((b, total))
            mask = np.zeros((b, total), bool)
            np.put_along_axis(mask, np.argpartition(keys, m - 1, axis=1)[:, :m], True, axis=1)
            done += b
            yield mask
    return gen_mc(), budget + 1, "monte_carlo"


def _run(stat_fn, m, n, budget, seed, exact_limit, keep_null):
    blocks, total, mode = _labelings(m, n, budget, seed, exact_limit)
    observed = None
    ge = 0
    kept = []
    for mask in blocks:
        vals = stat_fn(mask)
        if observed is None:
            observed = float(vals[0])
            # tolerance guards against rounding between algebraically equal labellings
            tol = 1e-12 * max(abs(observed), 1.0)
        ge += int(np.count_nonzero(vals >= observed - tol))
        if keep_null:
            kept.append(vals)
    null = np.concatenate(kept) if keep_null else None
    return PermutationTestResult(observed, ge / total, total, mode, null)


def _split(a, b, p):
    xa = a if isinstance(a, np.ndarray) else stack_spectra(a, p)
    xb = b if isinstance(b, np.ndarray) else stack_spectra(b, p)
    xa, xb = np.atleast_2d(np.asarray(xa, float)), np.atleast_2d(np.asarray(xb, float))
    if xa.shape[1] != xb.shape[1]:
        raise ValidationError("samples have differing spectrum lengths")
    if p is not None:
        xa, xb = xa[:, :p], xb[:, :p]
    return xa, xb


def pooled_se(xa, xb) -> np.ndarray:
    """Pooled standard error per coordinate in the printed form
    sqrt((m-1) s_a^2 + (n-1) s_b^2) / sqrt(1/m + 1/n)."""
    m, n = len(xa), len(xb)
    num = (m - 1) * xa.var(axis=0, ddof=1) + (n - 1) * xb.var(axis=0, ddof=1)
    return np.sqrt(num) / np.sqrt(1.0 / m + 1.0 / n)


def max_t_test(
    a,
    b,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    p: int | None = None,
    exact_limit: int = EXACT_LIMIT,
    keep_null: bool = False,
) -> PermutationTestResult:
    """One-sided permutation test on t_max = max_j |mean_a - mean_b| / SE_j.

    Raises:
        ZeroVariance: SE_j is zero for some coordinate of the observed split.
    """
    xa, xb = _split(a, b, p)
    m, n = len(xa), len(xb)
    if m < 2 or n < 2:
        raise ValidationError("max-t test needs at least two parts per group")
    se = pooled_se(xa, xb)
    if np.any(se == 0):
        j = int(np.argmax(se == 0))
        raise ZeroVariance(f"pooled standard error is zero for coordinate {j}", index=j)
    x = np.vstack([xa, xb])
    x = x - x.mean(axis=0)
    x2 = x * x
    tot, tot2 = x.sum(axis=0), x2.sum(axis=0)
    scale = 1.0 / math.sqrt(1.0 / m + 1.0 / n)

    def stat(mask):
        w = mask.astype(float)
        sa, sa2 = w @ x, w @ x2
        sb, sb2 = tot - sa, tot2 - sa2
        ma, mb = sa / m, sb / n
        ssa = np.maximum(sa2 - m * ma * ma, 0.0)
        ssb = np.maximum(sb2 - n * mb * mb, 0.0)
        se_p = np.sqrt(ssa + ssb) * scale
        diff = np.abs(ma - mb)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se_p > 0, diff / se_p, np.where(diff > 0, np.inf, 0.0))
        return t.max(axis=1)

    return _run(stat, m, n, budget, seed, exact_limit, keep_null)


def rank_sum_moments(m: int, n: int) -> tuple[float, float]:
    """Mean and variance of the rank sum of m parts among m + n."""
    return m * (m + n + 1) / 2.0, m * n * (m + n + 1) / 12.0


def ranksum_test(
    a,
    b,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    p: int | None = None,
    exact_limit: int = EXACT_LIMIT,
    keep_null: bool = False,
) -> PermutationTestResult:
    """One-sided permutation test on T0 = sum_j T_j^2 with T_j the
    standardized rank sum of group a in coordinate j (average ranks on ties)."""
    xa, xb = _split(a, b, p)
    m, n = len(xa), len(xb)
    if m < 1 or n < 1:
        raise ValidationError("rank-sum test needs at least one part per group")
    r = rankdata(np.vstack([xa, xb]), axis=0)
    mean, var = rank_sum_moments(m, n)
    sd = math.sqrt(var)

    def stat(mask):
        t = (mask.astype(float) @ r - mean) / sd
        return np.einsum("ij,ij->i", t, t)

    return _run(stat, m, n, budget, seed, exact_limit, keep_null)
