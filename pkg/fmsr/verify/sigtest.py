"""
Paired significance tests on per-date score series: stationary block bootstrap with
automatic block length and bias-corrected and accelerated (BCa) intervals for the mean
difference.
"""
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from arch.bootstrap import optimal_block_length
from scipy.stats import norm

from fmsr.errors import ValidationError
from fmsr.model.parallel import parallel
from fmsr.model.utils import keyed_rng

logger = logging.getLogger(__name__)

MIN_SERIES_LENGTH = 8
MIN_RESAMPLES = 1000
SIGTEST_COLUMNS = [
    "metric",
    "channel",
    "lead_h",
    "q",
    "estimate",
    "lo",
    "hi",
    "block_len",
    "significant",
]
PAIR_KEYS = ["metric", "channel", "lead_h", "q"]


@dataclass(frozen=True)
class PairedSeries:
    """Per-date score differences d_t = s^A_t - s^B_t."""

    diff: np.ndarray
    metric: str = ""
    channel: str = ""
    lead_h: int = 0
    q: float = float("nan")

    def __post_init__(self):
        d = np.asarray(self.diff, dtype=np.float64)
        if d.ndim != 1 or d.size < MIN_SERIES_LENGTH:
            raise ValidationError(
                f"paired series {self.metric}/{self.channel}/{self.lead_h}h needs at "
                f"least {MIN_SERIES_LENGTH} dates, got {d.size}"
            )
        if not np.all(np.isfinite(d)):
            raise ValidationError(
                f"paired series {self.metric}/{self.channel}/{self.lead_h}h has non-finite values"
            )
        object.__setattr__(self, "diff", d)

    @classmethod
    def from_scores(cls, a, b, **meta) -> "PairedSeries":
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValidationError(f"score series lengths differ: {a.shape} vs {b.shape}")
        return cls(diff=a - b, **meta)


@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    lo: float
    hi: float
    level: float
    block_len: int
    n_resamples: int
    significant: bool
    degenerate: bool = False
    z0: float = 0.0
    acceleration: float = 0.0


def auto_block_length(series: np.ndarray) -> int:
    """
    Politis-White (with the Patton-Politis-White correction) expected block length for
    the stationary bootstrap, rounded and clamped to [1, T // 3]; 1 for constant series.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size < MIN_SERIES_LENGTH:
        raise ValidationError(f"need at least {MIN_SERIES_LENGTH} values, got {x.size}")
    if np.ptp(x) == 0:
        return 1
    b = float(optimal_block_length(x)["stationary"].iloc[0])
    if not np.isfinite(b):
        return 1
    return int(np.clip(round(b), 1, max(1, x.size // 3)))


def stationary_bootstrap_indices(
    n: int, mean_block_len: float, rng: np.random.Generator
) -> np.ndarray:
    """
    Length-n index resample: each position starts a new block (uniform start) with
    probability 1 / mean_block_len, otherwise continues the previous block, wrapping
    circularly.
    """
    if mean_block_len < 1:
        raise ValidationError(f"mean block length must be >= 1, got {mean_block_len}")
    starts = rng.integers(0, n, size=n)
    restart = rng.random(n) < 1.0 / mean_block_len
    restart[0] = True
    first = np.flatnonzero(restart)
    block = np.cumsum(restart) - 1
    offset = np.arange(n) - first[block]
    return (starts[first][block] + offset) % n


def stationary_bootstrap_resample(
    series: np.ndarray, mean_block_len: float, rng: np.random.Generator
) -> np.ndarray:
    series = np.asarray(series)
    return series[stationary_bootstrap_indices(len(series), mean_block_len, rng)]


class _ResampleMeans(object):
    def __init__(self, series: np.ndarray, block_len: int, seed: int, stream: int):
        self.series = series
        self.block_len = block_len
        self.seed = seed
        self.stream = stream

    def __call__(self, chunk: Tuple[int, int]) -> np.ndarray:
        lo, hi = chunk
        out = np.empty(hi - lo)
        for j, i in enumerate(range(lo, hi)):
            rng = keyed_rng(self.seed, self.stream, i)
            out[j] = stationary_bootstrap_resample(self.series, self.block_len, rng).mean()
        return out


def bootstrap_means(
    series: np.ndarray,
    block_len: int,
    n_resamples: int,
    seed: int = 0,
    stream: int = 0,
    n_workers: int = 1,
) -> np.ndarray:
    """Means of n_resamples stationary-bootstrap resamples; resample i uses keyed_rng(seed, stream, i)."""
    step = max(1, -(-n_resamples // max(1, n_workers)))
    chunks = [(i, min(i + step, n_resamples)) for i in range(0, n_resamples, step)]
    parts = parallel(
        _ResampleMeans(np.asarray(series, dtype=np.float64), block_len, seed, stream),
        chunks,
        n_workers=n_workers,
        progress_bar=None,
    )
    return np.concatenate(parts)


def bias_correction(boot: np.ndarray, estimate: float) -> float:
    """z0 = Phi^-1(fraction of resamples below the estimate, ties counted half)."""
    b = len(boot)
    p = (np.sum(boot < estimate) + 0.5 * np.sum(boot == estimate)) / b
    p = np.clip(p, 0.5 / b, 1.0 - 0.5 / b)
    return float(norm.ppf(p))


def jackknife_acceleration(series: np.ndarray) -> float:
    """Skewness-based acceleration from leave-one-out means; 0 for a zero denominator."""
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    loo = (x.sum() - x) / (n - 1)
    d = loo.mean() - loo
    den = 6.0 * np.sum(d * d) ** 1.5
    if den == 0:
        return 0.0
    return float(np.sum(d ** 3) / den)


def bca_endpoints(boot: np.ndarray, z0: float, a: float, level: float) -> Tuple[float, float]:
    alpha = (1.0 - level) / 2.0
    out = []
    for zq in norm.ppf([alpha, 1.0 - alpha]):
        adj = norm.cdf(z0 + (z0 + zq) / (1.0 - a * (z0 + zq)))
        out.append(float(np.quantile(boot, adj)))
    return out[0], out[1]


def percentile_interval(boot: np.ndarray, level: float = 0.95) -> Tuple[float, float]:
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(boot, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _check_level(level: float, n_resamples: int) -> None:
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    if n_resamples < MIN_RESAMPLES:
        raise ValidationError(
            f"n_resamples must be >= {MIN_RESAMPLES}, got {n_resamples}"
        )


def bca_interval(
    series: np.ndarray,
    level: float = 0.95,
    n_resamples: int = 4000,
    seed: int = 0,
    stream: int = 0,
    block_len: Optional[int] = None,
    n_workers: int = 1,
) -> BootstrapResult:
    """
    BCa interval for the mean of a (dependent) series.
    :param block_len: expected block length (default: auto_block_length)
    :param stream: substream key separating independent tests under one seed
    :return: significant is True iff 0 lies outside [lo, hi]
    """
    _check_level(level, n_resamples)
    x = PairedSeries(diff=series).diff
    estimate = float(x.mean())
    block_len = auto_block_length(x) if block_len is None else int(block_len)
    boot = bootstrap_means(x, block_len, n_resamples, seed, stream, n_workers)
    if np.ptp(boot) == 0:
        return BootstrapResult(
            estimate=estimate,
            lo=estimate,
            hi=estimate,
            level=level,
            block_len=block_len,
            n_resamples=n_resamples,
            significant=estimate != 0.0,
            degenerate=True,
        )
    z0 = bias_correction(boot, estimate)
    a = jackknife_acceleration(x)
    lo, hi = bca_endpoints(boot, z0, a, level)
    return BootstrapResult(
        estimate=estimate,
        lo=lo,
        hi=hi,
        level=level,
        block_len=block_len,
        n_resamples=n_resamples,
        significant=not (lo <= 0.0 <= hi),
        z0=z0,
        acceleration=a,
    )


def paired_test(
    scores_a: pd.DataFrame,
    scores_b: pd.DataFrame,
    level: float = 0.95,
    n_resamples: int = 4000,
    seed: int = 0,
    n_workers: int = 1,
) -> pd.DataFrame:
    """
    Pair two per-date score tables (metric, channel, lead_h, q, init, value) on their
    keys and test the mean of A - B for every (metric, channel, lead_h, q) group.
    Negative estimates favour A for negatively oriented scores.
    """
    _check_level(level, n_resamples)
    keys = PAIR_KEYS + ["init"]
    a = scores_a.copy()
    b = scores_b.copy()
    for df in (a, b):
        df["q"] = df["q"].fillna(-1.0)
    merged = a.merge(b, on=keys, suffixes=("_a", "_b"), how="inner")
    if merged.empty:
        raise ValidationError("score tables share no (metric, channel, lead_h, q, init) rows")
    n_unmatched = len(a) + len(b) - 2 * len(merged)
    if n_unmatched:
        logger.warning("%d score rows have no partner and are ignored", n_unmatched)
    rows: List[dict] = []
    start = time.time()
    for stream, (key, grp) in enumerate(merged.groupby(PAIR_KEYS, sort=True)):
        metric, channel, lead_h, q = key
        grp = grp.sort_values("init")
        series = PairedSeries.from_scores(
            grp["value_a"], grp["value_b"], metric=metric, channel=channel, lead_h=lead_h
        )
        res = bca_interval(
            series.diff, level, n_resamples, seed, stream, n_workers=n_workers
        )
        rows.append(
            {
                "metric": metric,
                "channel": channel,
                "lead_h": lead_h,
                "q": q if q >= 0 else np.nan,
                "estimate": res.estimate,
                "lo": res.lo,
                "hi": res.hi,
                "block_len": res.block_len,
                "significant": res.significant,
            }
        )
    logger.info(
        "Ran %d paired tests (%d resamples each) in %.2fs",
        len(rows),
        n_resamples,
        time.time() - start,
    )
    return pd.DataFrame(rows, columns=SIGTEST_COLUMNS)
