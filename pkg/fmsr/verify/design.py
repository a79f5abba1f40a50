"""
Design-validation diagnostics: how well re-coarsened super-resolved states reproduce the
coarse states they were conditioned on (pattern correlation, activity ratio, NRMSE).
All spatial averages are area weighted.
"""
import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from fmsr.data.grid import Field, GridSpec, Trajectory, area_mean
from fmsr.data.synth import Climatology
from fmsr.errors import ValidationError

logger = logging.getLogger(__name__)

DESIGN_COLUMNS = ["channel", "lead_h", "corr", "activity_ratio", "nrmse", "n_samples"]


def pattern_correlation_array(a: np.ndarray, b: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Area-weighted Pearson correlation over the trailing (lat, lon) axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - area_mean(a, grid)[..., None, None]
    db = b - area_mean(b, grid)[..., None, None]
    va = area_mean(da * da, grid)
    vb = area_mean(db * db, grid)
    if np.any(va <= 0) or np.any(vb <= 0):
        raise ValidationError("pattern correlation is undefined for a zero-variance field")
    return np.clip(area_mean(da * db, grid) / np.sqrt(va * vb), -1.0, 1.0)


def pattern_correlation(a: Field, b: Field) -> np.ndarray:
    a.check_compatible(b)
    return pattern_correlation_array(a.data, b.data, a.grid)


def _check_series(name: str, fields: Sequence[Field]) -> None:
    if len(fields) == 0:
        raise ValidationError(f"{name} needs at least one field")
    for f in fields[1:]:
        fields[0].check_compatible(f)


def activity(fields: Sequence[Field], climatology: Optional[Climatology] = None) -> np.ndarray:
    """
    Mean over time of the area-weighted spatial variance of the anomaly
    (field - climatology at its valid time), per channel.
    """
    _check_series("activity", fields)
    total = np.zeros(len(fields[0].channels))
    grid = fields[0].grid
    for f in fields:
        anom = f.data.astype(np.float64)
        if climatology is not None:
            if climatology.grid != grid:
                raise ValidationError(
                    f"climatology on {climatology.grid}, fields on {grid}"
                )
            anom = anom - climatology.mean_for(f.timestamp)
        anom = anom - area_mean(anom, grid)[:, None, None]
        total += area_mean(anom * anom, grid)
    return total / len(fields)


def activity_ratio(
    sr_re: Sequence[Field],
    lr: Sequence[Field],
    climatology: Optional[Climatology] = None,
) -> np.ndarray:
    if len(sr_re) != len(lr):
        raise ValidationError(f"length mismatch: {len(sr_re)} vs {len(lr)}")
    ref = activity(lr, climatology)
    if np.any(ref <= 0):
        raise ValidationError("reference activity is zero")
    return activity(sr_re, climatology) / ref


def _mse_per_time(sr_re: Sequence[Field], lr: Sequence[Field]) -> np.ndarray:
    if len(sr_re) != len(lr):
        raise ValidationError(f"length mismatch: {len(sr_re)} vs {len(lr)}")
    _check_series("nrmse", sr_re)
    out = []
    for a, b in zip(sr_re, lr):
        a.check_compatible(b)
        d = a.data.astype(np.float64) - b.data.astype(np.float64)
        out.append(area_mean(d * d, a.grid))
    return np.stack(out)


def nrmse(sr_re: Sequence[Field], lr: Sequence[Field], sigma_clim: np.ndarray) -> np.ndarray:
    """sqrt(time-mean area-weighted MSE) / sigma_clim, per channel."""
    sigma = np.asarray(sigma_clim, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValidationError("climatological standard deviation must be positive")
    return np.sqrt(_mse_per_time(sr_re, lr).mean(axis=0)) / sigma


def rmse_map(sr_re: Sequence[Field], lr: Sequence[Field]) -> np.ndarray:
    """Per-pixel RMSE over time, [C, lat, lon]."""
    if len(sr_re) != len(lr) or len(sr_re) == 0:
        raise ValidationError("rmse_map needs matched, non-empty sequences")
    acc = np.zeros(sr_re[0].data.shape)
    for a, b in zip(sr_re, lr):
        a.check_compatible(b)
        acc += (a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2
    return np.sqrt(acc / len(sr_re))


def design_report(
    sr_re: Sequence[Trajectory],
    lr: Sequence[Trajectory],
    climatology: Climatology,
    sigma_clim: Optional[np.ndarray] = None,
) -> pd.DataFrame:
    """
    One row per (channel, lead): time-mean pattern correlation, activity ratio and NRMSE
    of re-coarsened super-resolved trajectories against the coarse trajectories.
    :param sr_re: re-coarsened SR trajectories, one per (init, member)
    :param lr: the matching coarse trajectories
    :param sigma_clim: defaults to climatology.sigma_clim
    """
    if len(sr_re) != len(lr) or len(sr_re) == 0:
        raise ValidationError("design_report needs matched, non-empty trajectory lists")
    sigma = climatology.sigma_clim if sigma_clim is None else sigma_clim
    n_leads = lr[0].T
    labels = lr[0].channels.labels
    rows = []
    for k in range(n_leads):
        a = [t.states[k] for t in sr_re]
        b = [t.states[k] for t in lr]
        corr = np.mean([pattern_correlation(x, y) for x, y in zip(a, b)], axis=0)
        ratio = activity_ratio(a, b, climatology)
        err = nrmse(a, b, sigma)
        lead_h = lr[0].lead_hours[k]
        for c, label in enumerate(labels):
            rows.append(
                {
                    "channel": label,
                    "lead_h": lead_h,
                    "corr": corr[c],
                    "activity_ratio": ratio[c],
                    "nrmse": err[c],
                    "n_samples": len(a),
                }
            )
        logger.info(
            "lead %dh: min corr %.4f, activity ratio %.3f..%.3f, max nrmse %.4f",
            lead_h,
            corr.min(),
            ratio.min(),
            ratio.max(),
            err.max(),
        )
    return pd.DataFrame(rows, columns=DESIGN_COLUMNS)
