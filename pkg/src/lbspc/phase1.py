"""Phase I check of a candidate reference sample: a rank-based change-point
scan calibrated by permuting part order."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import TooFewParts
from .permtest import stack_spectra

MIN_SEGMENT = 5


@dataclass(frozen=True)
class PhaseIConfig:
    """Attributes:
        fap: target false-alarm probability.
        eig_range: inclusive 1-based eigenvalue indices used (lambda_1 excluded).
        permutations: random reorderings used for the threshold.
        seed: seed for the reorderings.
    """

    fap: float = 0.05
    eig_range: tuple[int, int] = (2, 15)
    permutations: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fap < 1:
            raise ValueError("fap must be in (0, 1)")
        lo, hi = self.eig_range
        if lo < 2 or hi < lo:
            raise ValueError(f"eig_range must satisfy 2 <= lo <= hi, got {self.eig_range}")
        if self.permutations < 1:
            raise ValueError("permutations must be >= 1")


@dataclass(frozen=True)
class PhaseIResult:
    alarm: bool
    statistic: float
    threshold: float
    estimated_changepoint: int | None
    eig_range: tuple[int, int]

    def as_dict(self) -> dict:
        return {
            "alarm": self.alarm,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "changepoint": self.estimated_changepoint,
            "eig_range": list(self.eig_range),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)


def _select(sample, eig_range):
    x = sample if isinstance(sample, np.ndarray) else stack_spectra(sample)
    x = np.asarray(x, float)
    lo, hi = eig_range
    if x.shape[1] < hi:
        raise ValueError(f"need {hi} eigenvalues per part, got {x.shape[1]}")
    return x[:, lo - 1:hi]


def split_statistics(ranks) -> np.ndarray:
    """T0 for every split tau in [5, m0-5] given pooled ranks.

    ``ranks`` is (..., m0, p); rows are parts in time order. Returns
    (..., n_splits) values, split tau = 5 first.
    """
    m0 = ranks.shape[-2]
    taus = np.arange(MIN_SEGMENT, m0 - MIN_SEGMENT + 1)
    csum = np.cumsum(ranks, axis=-2)[..., taus - 1, :]
    mean = taus * (m0 + 1) / 2.0
    sd = np.sqrt(taus * (m0 - taus) * (m0 + 1) / 12.0)
    t = (csum - mean[:, None]) / sd[:, None]
    return np.sum(t * t, axis=-1)


def phase1_scan(sample, config: PhaseIConfig | None = None) -> PhaseIResult:
    """Max over split points tau of the rank-sum T0 between parts 1..tau and
    tau+1..m0; the threshold is the (1 - fap) quantile of the same maximum
    over random reorderings of the parts (observed order included), and the
    alarm uses a strict comparison.

    Raises:
        TooFewParts: fewer than 10 parts.
    """
    config = config or PhaseIConfig()
    x = _select(sample, config.eig_range)
    m0 = x.shape[0]
    if m0 < 2 * MIN_SEGMENT:
        raise TooFewParts(f"phase I needs at least {2 * MIN_SEGMENT} parts, got {m0}")
    r = rankdata(x, axis=0)
    obs_splits = split_statistics(r)
    observed = float(obs_splits.max())
    tau = int(np.argmax(obs_splits)) + MIN_SEGMENT
    # canonical row order makes the null sample a function of the multiset of
    # parts only, so reordering the input cannot change it
    canon = r[np.lexsort(r.T[::-1])]
    rng = np.random.default_rng(config.seed)
    null = np.empty(config.permutations)
    chunk = max(1, 200_000 // (m0 * x.shape[1]))
    for s in range(0, config.permutations, chunk):
        b = min(chunk, config.permutations - s)
        order = np.argsort(rng.random((b, m0)), axis=1)
        null[s:s + b] = split_statistics(canon[order]).max(axis=-1)
    vals = np.sort(np.append(null, observed))
    threshold = float(vals[int(math.ceil((1 - config.fap) * len(vals))) - 1])
    return PhaseIResult(observed > threshold, observed, threshold, tau, tuple(config.eig_range))


def phase1_eig_sweep(samples, ranges, config: PhaseIConfig | None = None) -> dict:
    """Empirical alarm probability per eigenvalue range over replicated
    samples. Returns {(lo, hi): probability}."""
    config = config or PhaseIConfig()
    samples = list(samples)
    out = {}
    for rg in ranges:
        cfg = PhaseIConfig(config.fap, tuple(rg), config.permutations, config.seed)
        alarms = [phase1_scan(s, PhaseIConfig(cfg.fap, cfg.eig_range, cfg.permutations, cfg.seed + i)).alarm
                  for i, s in enumerate(samples)]
        out[tuple(rg)] = float(np.mean(alarms))
    return out
