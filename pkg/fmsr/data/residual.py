"""
Residual decomposition x_hr = up(x_lr) + r and per-channel normalization statistics.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Literal, Optional, Tuple

import numpy as np

from fmsr.errors import ValidationError
from .grid import Field
from .regrid import RegridPlan, interpolate_up
from .store import read_json

logger = logging.getLogger(__name__)

NormKind = Literal["input", "residual"]


def decompose(hr: Field, lr: Field, plan_up: RegridPlan) -> Tuple[Field, Field]:
    """
    Split a high-resolution state into the upsampled coarse state and the residual.
    The residual is kept in float64 so that reconstruct() returns hr bit-exactly.
    :return: (upsampled, residual)
    """
    if lr.grid != plan_up.src or hr.grid != plan_up.dst:
        raise ValidationError(
            f"decompose expects lr on {plan_up.src} and hr on {plan_up.dst}, "
            f"got {lr.grid} and {hr.grid}"
        )
    if hr.channels != lr.channels:
        raise ValidationError(
            f"catalog mismatch: {hr.channels.labels} vs {lr.channels.labels}"
        )
    up = interpolate_up(lr, plan_up)
    up = up.with_data(up.data.astype(hr.data.dtype))
    residual = hr.data.astype(np.float64) - up.data.astype(np.float64)
    return up, hr.with_data(residual)


def reconstruct(upsampled: Field, residual: Field, dtype=None) -> Field:
    upsampled.check_compatible(residual)
    out = residual.data.astype(np.float64) + upsampled.data.astype(np.float64)
    return upsampled.with_data(out.astype(dtype or upsampled.data.dtype))


@dataclass
class MomentAccumulator:
    """
    Per-channel running count, mean and sum of squared deviations; shards merge with
    Chan's pairwise update.
    """

    n_channels: int
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.n_channels)
        if self.m2 is None:
            self.m2 = np.zeros(self.n_channels)

    def update(self, data: np.ndarray) -> "MomentAccumulator":
        """:param data: [C, ...] values of one sample"""
        x = np.asarray(data, dtype=np.float64).reshape(self.n_channels, -1)
        n = x.shape[1]
        mean = x.mean(axis=1)
        m2 = ((x - mean[:, None]) ** 2).sum(axis=1)
        return self.merge(MomentAccumulator(self.n_channels, n, mean, m2))

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.n_channels != self.n_channels:
            raise ValidationError("cannot merge accumulators of different width")
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        self.count = n
        return self

    @property
    def std(self) -> np.ndarray:
        """Population (divide-by-n) standard deviation."""
        return np.sqrt(self.m2 / self.count)


@dataclass(frozen=True, eq=False)
class NormStats:
    """
    Per-channel normalization statistics of interpolated-LR inputs (mu_x, sigma_x) and
    residuals (mu_r, sigma_r), fitted on the training split.
    """

    labels: Tuple[str, ...]
    mu_x: np.ndarray
    sigma_x: np.ndarray
    mu_r: np.ndarray
    sigma_r: np.ndarray
    count: int

    def __post_init__(self):
        for name in ("sigma_x", "sigma_r"):
            s = np.asarray(getattr(self, name))
            if np.any(s <= 0):
                raise ValidationError(f"{name} must be positive for every channel")

    def pick(self, kind: NormKind) -> Tuple[np.ndarray, np.ndarray]:
        if kind == "input":
            return self.mu_x, self.sigma_x
        if kind == "residual":
            return self.mu_r, self.sigma_r
        raise ValidationError(f"unknown normalization kind {kind!r}")

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "channels": {
                lab: {
                    "mu_x": float(self.mu_x[i]),
                    "sigma_x": float(self.sigma_x[i]),
                    "mu_r": float(self.mu_r[i]),
                    "sigma_r": float(self.sigma_r[i]),
                }
                for i, lab in enumerate(self.labels)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        labels = tuple(d["channels"].keys())
        col = lambda k: np.array([d["channels"][l][k] for l in labels])
        return cls(
            labels=labels,
            mu_x=col("mu_x"),
            sigma_x=col("sigma_x"),
            mu_r=col("mu_r"),
            sigma_r=col("sigma_r"),
            count=int(d["count"]),
        )

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_json(cls, path: str, hint: Optional[str] = None) -> "NormStats":
        return cls.from_dict(read_json(path, hint))

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _checked_std(acc: MomentAccumulator, labels: List[str], what: str) -> np.ndarray:
    std = acc.std
    for i, lab in enumerate(labels):
        if not std[i] > 1e-10 * max(1.0, abs(acc.mean[i])):
            raise ValidationError(
                f"channel {lab!r} has zero variance in {what}; cannot normalize"
            )
    return std


def fit_norm_stats(samples: Iterable[Tuple[Field, Field]]) -> NormStats:
    """
    Flat (unweighted) per-channel statistics over every grid point and sample.
    :param samples: (upsampled, residual) pairs of the training split
    """
    acc_x: Optional[MomentAccumulator] = None
    acc_r: Optional[MomentAccumulator] = None
    n = 0
    labels: List[str] = []
    for up, res in samples:
        if acc_x is None:
            labels = up.channels.labels
            acc_x = MomentAccumulator(len(labels))
            acc_r = MomentAccumulator(len(labels))
        up.check_compatible(res)
        acc_x.update(up.data)
        acc_r.update(res.data)
        n += 1
    if n < 2:
        raise ValidationError(f"fit_norm_stats needs at least 2 samples, got {n}")
    stats = NormStats(
        labels=tuple(labels),
        mu_x=acc_x.mean,
        sigma_x=_checked_std(acc_x, labels, "inputs"),
        mu_r=acc_r.mean,
        sigma_r=_checked_std(acc_r, labels, "residuals"),
        count=n,
    )
    logger.info("Fitted normalization statistics on %d samples", n)
    return stats


def _check_labels(f: Field, stats: NormStats) -> None:
    if tuple(f.channels.labels) != stats.labels:
        raise ValidationError(
            f"channel mismatch: field {f.channels.labels} vs stats {list(stats.labels)}"
        )


def normalize(f: Field, stats: NormStats, kind: NormKind) -> Field:
    _check_labels(f, stats)
    mu, sigma = stats.pick(kind)
    out = (f.data.astype(np.float64) - mu[:, None, None]) / sigma[:, None, None]
    return f.with_data(out.astype(f.data.dtype))


def denormalize(f: Field, stats: NormStats, kind: NormKind) -> Field:
    _check_labels(f, stats)
    mu, sigma = stats.pick(kind)
    out = f.data.astype(np.float64) * sigma[:, None, None] + mu[:, None, None]
    return f.with_data(out.astype(f.data.dtype))


@dataclass(frozen=True, eq=False)
class ResidualSample:
    """Normalized (conditioning, target) training record on the HR grid."""

    conditioning: Field
    target: Field
    time_index: Optional[int] = None

    def __post_init__(self):
        self.conditioning.check_compatible(self.target)


def make_sample(
    hr: Field, lr: Field, plan_up: RegridPlan, stats: NormStats
) -> ResidualSample:
    up, res = decompose(hr, lr, plan_up)
    return ResidualSample(
        conditioning=normalize(up, stats, "input"),
        target=normalize(res.with_data(res.data.astype(np.float32)), stats, "residual"),
        time_index=hr.timestamp,
    )
