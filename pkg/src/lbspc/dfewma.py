"""Distribution-free EWMA chart on exponentially weighted ranks, with a
permutation-calibrated variable control limit."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ChartConfig:
    """Chart parameters.

    Attributes:
        m0: number of reference (Phase I) parts.
        alpha: per-step false-alarm probability; in-control ARL is 1/alpha.
        ewma_weight: smoothing weight lambda in [0, 1).
        w_min, w_max: bounds of the window of Phase-II observations.
        p: number of leading eigenvalues monitored.
        limit_permutations: random relabelings drawn per step.
        seed: seed for the relabelings.
        condition_lags: number of past steps whose non-alarm is conditioned
            on when calibrating the limit (``None`` means ``w_max``; 0 gives
            the plain unconditional quantile).
        first_index: 1-based index of the first monitored eigenvalue.
    """

    m0: int = 100
    alpha: float = 0.005
    ewma_weight: float = 0.01
    w_min: int = 1
    w_max: int = 10
    p: int = 15
    limit_permutations: int = 1000
    seed: int = 0
    condition_lags: int | None = None
    first_index: int = 1

    def __post_init__(self):
        if self.m0 < 1:
            raise ValueError("m0 must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not 0 <= self.ewma_weight < 1:
            raise ValueError("ewma_weight must be in [0, 1)")
        if self.w_min < 1 or self.w_max < self.w_min:
            raise ValueError("need 1 <= w_min <= w_max")
        if self.p < 1 or self.first_index < 1:
            raise ValueError("p and first_index must be >= 1")
        if self.limit_permutations < 1:
            raise ValueError("limit_permutations must be >= 1")

    @property
    def lags(self) -> int:
        return self.w_max if self.condition_lags is None else self.condition_lags

    def window(self, n: int) -> int:
        return min(max(n, self.w_min), self.w_max, n)

    def select(self, values) -> np.ndarray:
        """Monitored coordinates of a spectrum (or of a stack of spectra)."""
        v = np.asarray(values, dtype=float)
        lo = self.first_index - 1
        if v.shape[-1] < lo + self.p:
            raise ValueError(f"need at least {lo + self.p} eigenvalues, got {v.shape[-1]}")
        return v[..., lo:lo + self.p]


def weighted_rank_moments(lam: float, w: int, total: int) -> tuple[float, float]:
    """Mean and variance of sum_{i<w} (1-lam)^i R_i when the R_i are w
    distinct ranks drawn uniformly without replacement from 1..total.

    With a_i = (1-lam)^i, each rank has variance (N+1)(N-1)/12 and each pair
    covariance -(N+1)/12, so Var = (N+1)/12 (N sum a_i^2 - (sum a_i)^2).
    The geometric sums go through expm1/log1p so small lam keeps full
    precision; lam = 0 gives w(N+1)/2 and w(N+1)(N-w)/12.
    """
    n1 = total + 1
    if lam == 0:
        return w * n1 / 2.0, w * n1 * (total - w) / 12.0
    lq = math.log1p(-lam)
    s1 = -math.expm1(w * lq) / lam
    s2 = -math.expm1(2 * w * lq) / (lam * (2.0 - lam))
    return s1 * n1 / 2.0, n1 * (total * s2 - s1 * s1) / 12.0


def _ranks(pooled):
    return rankdata(pooled, axis=0)


def _standardized(ranks_window, lam, total):
    """(w, p) or (B, w, p) window ranks, oldest first -> per-coordinate T_j."""
    w = ranks_window.shape[-2]
    weights = (1.0 - lam) ** np.arange(w - 1, -1, -1)
    mean, var = weighted_rank_moments(lam, w, total)
    s = np.tensordot(ranks_window, weights, axes=([-2], [0]))
    return (s - mean) / np.sqrt(var)


def weighted_rank_statistic(pooled, n: int, config: ChartConfig) -> tuple[np.ndarray, float]:
    """Per-coordinate statistics T_jn and their sum of squares T_n.

    Args:
        pooled: (m0 + n, p) values, reference parts first, then the Phase-II
            parts in time order.
        n: number of Phase-II parts.
    """
    x = np.asarray(pooled, dtype=float)
    if n < 1 or x.shape[0] < n + 1:
        raise ValueError("need n >= 1 and at least one reference part")
    total = x.shape[0]
    w = config.window(n)
    r = _ranks(x)
    tj = _standardized(r[total - w:], config.ewma_weight, total)
    return tj, float(np.sum(tj ** 2))


def _tail_statistics(tail, n, total, config, lags):
    """Statistics at lags 0..lags from the ranks of the last L pooled positions.

    ``tail`` is (B, L, p). Removing the newest k observations turns rank R_i
    into R_i - #{removed l : R_l < R_i}, which is the rank within the first
    total - k observations.
    """
    b, L, p = tail.shape
    out = np.full((b, lags + 1), -np.inf)
    lam = config.ewma_weight
    less = None
    if lags:
        less = tail[:, None, :, :] < tail[:, :, None, :]
    for k in range(lags + 1):
        nk = n - k
        if nk < 1:
            break
        w = config.window(nk)
        sl = slice(L - k - w, L - k)
        sub = tail[:, sl, :]
        if k:
            sub = sub - less[:, sl, L - k:, :].sum(axis=2)
        out[:, k] = np.sum(_standardized(sub, lam, total - k) ** 2, axis=-1)
    return out


@dataclass
class ChartState:
    """Reference spectra, the Phase-II stream so far and the limit history.

    Not safe for concurrent mutation.
    """

    reference: np.ndarray
    config: ChartConfig
    stream: list = field(default_factory=list)
    limits: list = field(default_factory=list)
    statistics: list = field(default_factory=list)
    last_statistic: float = float("nan")
    last_limit: float = float("nan")
    alarmed: bool = False
    rng: np.random.Generator | None = None

    @property
    def n(self) -> int:
        return len(self.stream)

    def log_rows(self):
        for i, (t, h) in enumerate(zip(self.statistics, self.limits), start=1):
            yield i, t, h, t > h

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "T_n", "limit", "alarm"])
            for i, t, h, a in self.log_rows():
                w.writerow([i, repr(t), repr(h), int(a)])


def start_chart(reference, config: ChartConfig) -> ChartState:
    """Initialise a chart from m0 reference spectra (rows)."""
    ref = config.select(np.atleast_2d(reference))
    if ref.shape[0] != config.m0:
        raise ValueError(f"expected {config.m0} reference parts, got {ref.shape[0]}")
    return ChartState(reference=ref, config=config, rng=np.random.default_rng(config.seed))


def _value_row(new_part, config):
    vals = getattr(new_part, "eigenvalues", new_part)
    return config.select(np.atleast_1d(np.asarray(vals, dtype=float)))


def step(state: ChartState, new_part, config: ChartConfig | None = None) -> ChartState:
    """Add one Phase-II part, compute T_n and its variable limit, decide.

    The limit is the (1 - alpha) empirical quantile of T_n over random
    relabelings of the pooled observations (the observed labelling
    included). Relabelings are kept only when they would not have alarmed
    at the previous ``condition_lags`` steps under the limits actually used
    there, so the limit is a conditional quantile given no earlier alarm;
    this is what makes the in-control run length geometric. Only the last
    w_max + lags positions of each relabeling matter, so only those are
    drawn.
    """
    cfg = config or state.config
    state.stream.append(_value_row(new_part, cfg))
    n = state.n
    pooled = np.vstack([state.reference, np.asarray(state.stream)])
    total = pooled.shape[0]
    ranks = _ranks(pooled)
    lags = min(cfg.lags, n - 1)
    L = min(cfg.w_max + lags, total)
    observed = float(_tail_statistics(ranks[None, total - L:], n, total, cfg, 0)[0, 0])
    keys = state.rng.random((cfg.limit_permutations, total))
    # positions of the last L labels under a uniform random relabelling
    idx = np.argpartition(keys, total - L, axis=1)[:, total - L:]
    order = np.argsort(np.take_along_axis(keys, idx, axis=1), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)
    perm = _tail_statistics(ranks[idx], n, total, cfg, lags)
    keep = np.ones(len(perm), bool)
    for k in range(1, lags + 1):
        keep &= perm[:, k] <= state.limits[n - 1 - k]
    vals = np.sort(np.append(perm[keep, 0], observed))
    limit = float(vals[int(math.ceil((1 - cfg.alpha) * len(vals))) - 1])
    state.statistics.append(observed)
    state.limits.append(limit)
    state.last_statistic = observed
    state.last_limit = limit
    state.alarmed = observed > limit
    return state


def run_chart(reference, stream, config: ChartConfig, stop_at_alarm: bool = True) -> ChartState:
    state = start_chart(reference, config)
    for part in stream:
        step(state, part)
        if state.alarmed and stop_at_alarm:
            break
    return state


# ---------------------------------------------------------------- run lengths

def _as_rows(bank):
    # a 1D bank holds one scalar per part (e.g. ICP objectives)
    b = np.asarray(bank, dtype=float)
    return b.reshape(-1, 1) if b.ndim == 1 else b


@dataclass
class PoolScenario:
    """Pre-simulated banks of per-part monitoring vectors.

    Each replication draws m0 reference parts from ``ic_bank`` without
    replacement and then streams parts from ``oc_bank`` (shuffled), or from
    the unused part of ``ic_bank`` when ``oc_bank`` is None.
    """

    ic_bank: np.ndarray
    oc_bank: np.ndarray | None = None
    name: str = "pool"

    def __post_init__(self):
        self.ic_bank = _as_rows(self.ic_bank)
        if self.oc_bank is not None:
            self.oc_bank = _as_rows(self.oc_bank)

    def draw(self, m0, rng):
        perm = rng.permutation(self.ic_bank.shape[0])
        ref = self.ic_bank[perm[:m0]]
        if self.oc_bank is None:
            stream = self.ic_bank[perm[m0:]]
        else:
            stream = self.oc_bank[rng.permutation(self.oc_bank.shape[0])]
        return ref, stream


@dataclass
class RunLengthReport:
    arl: float
    sdrl: float
    run_lengths: np.ndarray
    censored: int
    replications: int
    config: dict

    def histogram(self):
        vals, counts = np.unique(self.run_lengths, return_counts=True)
        return list(zip(vals.tolist(), counts.tolist()))

    def as_dict(self) -> dict:
        return {
            "arl": self.arl,
            "sdrl": self.sdrl,
            "replications": self.replications,
            "censored": self.censored,
            "config": self.config,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replication", "run_length"])
            for i, r in enumerate(self.run_lengths):
                w.writerow([i, int(r)])


def _one_replication(args):
    scenario, config, seed = args
    rng = np.random.default_rng(seed)
    ref, stream = scenario.draw(config.m0, rng)
    cfg = ChartConfig(**{**asdict(config), "seed": int(rng.integers(2 ** 63))})
    state = start_chart(ref, cfg)
    for part in stream:
        step(state, part)
        if state.alarmed:
            return state.n, False
    return state.n, True


def run_length_experiment(
    scenario: PoolScenario,
    config: ChartConfig,
    replications: int,
    seed: int = 0,
    workers: int = 1,
) -> RunLengthReport:
    """ARL and SDRL over independent replications.

    A replication whose stream runs out before an alarm is censored at the
    stream length; censored runs are counted and included at that length,
    so the reported ARL is then a lower bound.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(replications, dtype=np.uint64)
    jobs = [(scenario, config, int(s)) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_one_replication, jobs))
    else:
        results = [_one_replication(j) for j in jobs]
    rl = np.array([r for r, _ in results], dtype=int)
    censored = sum(c for _, c in results)
    sd = float(rl.std(ddof=1)) if len(rl) > 1 else 0.0
    return RunLengthReport(float(rl.mean()), sd, rl, int(censored), replications, asdict(config))
