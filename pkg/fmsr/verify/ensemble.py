"""
Fair ensemble verification: ensemble-mean RMSE, CRPS, energy score, Brier score and
spread-skill ratio, plus skill-score composition.

Scores are computed for a collection of forecasts (one EnsembleSet per initialization
date) against the matching truth trajectories; results are arrays [lead, channel]
averaged over dates. The *_kernel functions work on raw member-first arrays.
"""
import logging
from typing import Iterable, List, Literal, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fmsr.data.grid import ChannelCatalog, EnsembleSet, GridSpec, Trajectory, area_mean
from fmsr.data.synth import Climatology
from fmsr.errors import ValidationError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["metric", "channel", "lead_h", "q", "value"]
PER_DATE_COLUMNS = ["metric", "channel", "lead_h", "q", "init", "value"]
NEGATIVE_TOL = 1e-12

Ensembles = Union[EnsembleSet, Sequence[EnsembleSet]]
Truths = Union[Trajectory, Sequence[Trajectory]]


# ---- kernels -------------------------------------------------------------------------


def crps_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Pointwise fair CRPS. x: [M, ...] members, y: [...] truth.
    (1/M) sum_i |x_i - y| - (1/(2M(M-1))) sum_{i,j} |x_i - x_j|, the double sum taken
    over ordered pairs via sorted members: sum_{i,j} |x_i - x_j| = 2 sum_i (2i - M + 1) x_(i).
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise ValidationError(f"fair scores need at least 2 members, got {m}")
    skill = np.abs(x - y).mean(axis=0)
    xs = np.sort(x, axis=0)
    coef = (2 * np.arange(m) - m + 1).reshape((m,) + (1,) * (x.ndim - 1))
    pair_sum = 2.0 * (coef * xs).sum(axis=0)
    return skill - pair_sum / (2.0 * m * (m - 1))


def energy_kernel(x: np.ndarray, y: np.ndarray, weight: np.ndarray) -> float:
    """
    Fair energy score of one forecast. x: [M, D], y: [D]; each component is scaled by
    sqrt(weight) inside the Euclidean norm.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise ValidationError(f"fair scores need at least 2 members, got {m}")
    s = np.sqrt(np.asarray(weight, dtype=np.float64))
    xw = x * s
    yw = np.asarray(y, dtype=np.float64) * s
    skill = np.linalg.norm(xw - yw, axis=1).mean()
    pair_sum = 0.0
    for i in range(m):
        pair_sum += np.linalg.norm(xw - xw[i], axis=1).sum()
    return float(skill - pair_sum / (2.0 * m * (m - 1)))


def brier_kernel(x: np.ndarray, y: np.ndarray, threshold: np.ndarray) -> np.ndarray:
    """Pointwise fair Brier score (p - o)^2 - p(1 - p)/(M - 1) for the event v > threshold."""
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise ValidationError(f"fair scores need at least 2 members, got {m}")
    p = (x > threshold).mean(axis=0)
    o = (np.asarray(y) > threshold).astype(np.float64)
    return (p - o) ** 2 - p * (1.0 - p) / (m - 1)


# ---- input handling ------------------------------------------------------------------


def _stack(
    ens: Ensembles, truth: Truths, min_members: int = 2
) -> Tuple[np.ndarray, np.ndarray, GridSpec, ChannelCatalog, List[int], List[int]]:
    """
    :return: E [N, M, L, C, lat, lon], Y [N, L, C, lat, lon], grid, catalog, init times,
        lead hours
    """
    ens_list = [ens] if isinstance(ens, EnsembleSet) else list(ens)
    truth_list = [truth] if isinstance(truth, Trajectory) else list(truth)
    if len(ens_list) == 0 or len(ens_list) != len(truth_list):
        raise ValidationError(
            f"need one truth per forecast, got {len(ens_list)} and {len(truth_list)}"
        )
    first = ens_list[0]
    if first.M < min_members:
        raise ValidationError(f"need at least {min_members} members, got {first.M}")
    for e, t in zip(ens_list, truth_list):
        if e.M != first.M or e.T != first.T:
            raise ValidationError("all forecasts must share member count and length")
        if t.T < e.T:
            raise ValidationError(f"truth has {t.T} leads, forecast has {e.T}")
        e.members[0].states[0].check_compatible(t.states[0])
    E = np.stack([e.stack() for e in ens_list]).astype(np.float64)
    Y = np.stack([t.stack()[: first.T] for t in truth_list]).astype(np.float64)
    return (
        E,
        Y,
        first.grid,
        first.channels,
        [e.init_time for e in ens_list],
        first.members[0].lead_hours,
    )


# ---- scores --------------------------------------------------------------------------


def _radicand_sqrt(r: np.ndarray, negative: Literal["raise", "clip"]) -> np.ndarray:
    bad = r < -NEGATIVE_TOL
    if np.any(bad):
        if negative == "raise":
            raise ValidationError(
                f"fair ensemble-mean RMSE radicand {r.min():.3e} < 0; ensemble spread "
                "exceeds the error, inputs look inconsistent"
            )
        logger.warning("clipping %d negative fair RMSE radicands to 0", int(bad.sum()))
    return np.sqrt(np.maximum(r, 0.0))


def fair_ens_mean_rmse_array(
    E: np.ndarray,
    Y: np.ndarray,
    grid: GridSpec,
    negative: Literal["raise", "clip"] = "raise",
) -> np.ndarray:
    """E [N, M, ...lat, lon], Y [N, ...lat, lon] -> date-mean fair RMSE over leading dims."""
    m = E.shape[1]
    mean = E.mean(axis=1)
    err = area_mean((mean - Y) ** 2, grid)
    dev = area_mean(((E - mean[:, None]) ** 2).sum(axis=1), grid)
    return _radicand_sqrt((err - dev / (m * (m - 1))).mean(axis=0), negative)


def fair_ens_mean_rmse(
    ens: Ensembles, truth: Truths, negative: Literal["raise", "clip"] = "raise"
) -> np.ndarray:
    """
    sqrt of the date-mean of [area-weighted squared error of the ensemble mean minus
    1/(M(M-1)) times the summed area-weighted squared member deviations], [lead, channel].
    Radicands in [-1e-12, 0) are clamped to 0; below that raise unless negative="clip".
    """
    E, Y, grid, *_ = _stack(ens, truth)
    return fair_ens_mean_rmse_array(E, Y, grid, negative)


def ens_mean_rmse(ens: Ensembles, truth: Truths) -> np.ndarray:
    """Plain (not fair) ensemble-mean RMSE, [lead, channel]."""
    E, Y, grid, *_ = _stack(ens, truth, min_members=1)
    return np.sqrt(area_mean((E.mean(axis=1) - Y) ** 2, grid).mean(axis=0))


def fair_crps_per_date(ens: Ensembles, truth: Truths) -> np.ndarray:
    """[N, lead, channel]"""
    E, Y, grid, *_ = _stack(ens, truth)
    return area_mean(crps_kernel(np.moveaxis(E, 1, 0), Y), grid)


def fair_crps(ens: Ensembles, truth: Truths) -> np.ndarray:
    """Area-weighted, date-mean fair CRPS, [lead, channel]."""
    return fair_crps_per_date(ens, truth).mean(axis=0)


def energy_score_per_date(ens: Ensembles, truth: Truths) -> np.ndarray:
    """[N, lead]; the field vector stacks all channels, weighted by area x channel weight."""
    E, Y, grid, catalog, *_ = _stack(ens, truth)
    n, m, n_leads = E.shape[:3]
    w = (
        catalog.channel_weight[:, None, None]
        * np.broadcast_to(grid.cell_area_weight[:, None], grid.shape)[None]
    ).ravel()
    out = np.empty((n, n_leads))
    for i in range(n):
        for k in range(n_leads):
            out[i, k] = energy_kernel(E[i, :, k].reshape(m, -1), Y[i, k].ravel(), w)
    return out


def energy_score(ens: Ensembles, truth: Truths) -> np.ndarray:
    """Date-mean fair energy score, [lead]."""
    return energy_score_per_date(ens, truth).mean(axis=0)


def _brier_pair(
    E: np.ndarray, Y: np.ndarray, grid: GridSpec, climatology: Climatology, q: float
) -> np.ndarray:
    if not 0.0 < q < 1.0:
        raise ValidationError(f"Brier quantile must lie in (0, 1), got {q}")
    if climatology.grid != grid:
        raise ValidationError(f"climatology on {climatology.grid}, forecasts on {grid}")
    scores = []
    for level in (q, 1.0 - q):
        c = climatology.quantile(level)
        scores.append(area_mean(brier_kernel(np.moveaxis(E, 1, 0), Y, c), grid))
    return 0.5 * (scores[0] + scores[1])


def fair_brier_per_date(
    ens: Ensembles, truth: Truths, climatology: Climatology, q: float
) -> np.ndarray:
    """[N, lead, channel], averaged over the q and 1 - q thresholds."""
    E, Y, grid, *_ = _stack(ens, truth)
    return _brier_pair(E, Y, grid, climatology, q)


def fair_brier(
    ens: Ensembles, truth: Truths, climatology: Climatology, q: float
) -> np.ndarray:
    """Date-mean fair Brier score for exceeding the per-pixel climatological quantiles, [lead, channel]."""
    return fair_brier_per_date(ens, truth, climatology, q).mean(axis=0)


def spread_skill_ratio(ens: Ensembles, truth: Truths) -> np.ndarray:
    """
    sqrt((M+1)/M) * spread / ensemble-mean RMSE, [lead, channel]; the denominator is the
    plain ensemble-mean RMSE.
    """
    E, Y, grid, *_ = _stack(ens, truth)
    m = E.shape[1]
    spread = np.sqrt(area_mean(E.var(axis=1, ddof=1), grid).mean(axis=0))
    rmse = np.sqrt(area_mean((E.mean(axis=1) - Y) ** 2, grid).mean(axis=0))
    if np.any(rmse <= 0):
        raise ValidationError("spread-skill ratio is undefined for a zero ensemble-mean error")
    return np.sqrt((m + 1.0) / m) * spread / rmse


def skill_score(model_value, ref_value):
    """1 - model / reference."""
    ref = np.asarray(ref_value, dtype=np.float64)
    if np.any(ref <= 0):
        raise ValidationError(f"reference score must be positive, got {ref_value}")
    out = 1.0 - np.asarray(model_value, dtype=np.float64) / ref
    return float(out) if out.ndim == 0 else out


# ---- reports -------------------------------------------------------------------------


def _rows(metric: str, values: np.ndarray, labels: List[str], lead_hours, q=np.nan):
    for k, lead_h in enumerate(lead_hours):
        for c, label in enumerate(labels):
            yield {
                "metric": metric,
                "channel": label,
                "lead_h": lead_h,
                "q": q,
                "value": float(values[k, c]),
            }


def evaluate_ensemble(
    ens: Sequence[EnsembleSet],
    truth: Sequence[Trajectory],
    climatology: Climatology,
    brier_quantiles: Iterable[float] = (0.01, 0.05, 0.10),
) -> pd.DataFrame:
    """
    MetricReport: one row per (metric, channel, lead_h, q). The energy score spans all
    channels and is reported with channel "all". Member and date counts go to df.attrs.
    """
    E, Y, grid, catalog, _, lead_hours = _stack(ens, truth)
    labels = catalog.labels
    rows = []
    rows += _rows("fair_ens_mean_rmse", fair_ens_mean_rmse_array(E, Y, grid, "clip"), labels, lead_hours)
    rows += _rows("ens_mean_rmse", ens_mean_rmse(ens, truth), labels, lead_hours)
    rows += _rows("fair_crps", fair_crps(ens, truth), labels, lead_hours)
    for q in brier_quantiles:
        rows += _rows("fair_brier", _brier_pair(E, Y, grid, climatology, q).mean(axis=0), labels, lead_hours, q)
    rows += _rows("spread_skill_ratio", spread_skill_ratio(ens, truth), labels, lead_hours)
    es = energy_score(ens, truth)
    rows += _rows("energy_score", es[:, None], ["all"], lead_hours)
    df = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    df.attrs["n_members"] = int(E.shape[1])
    df.attrs["n_dates"] = int(E.shape[0])
    logger.info(
        "Evaluated %d forecasts x %d members x %d leads", E.shape[0], E.shape[1], E.shape[2]
    )
    return df


def per_date_scores(
    ens: Sequence[EnsembleSet],
    truth: Sequence[Trajectory],
    climatology: Climatology,
    brier_quantiles: Iterable[float] = (0.01, 0.05, 0.10),
) -> pd.DataFrame:
    """Per-initialization fair CRPS, Brier and energy scores; the input of paired tests."""
    E, Y, grid, catalog, inits, lead_hours = _stack(ens, truth)
    labels = catalog.labels
    rows = []

    def add(metric, values, names, q=np.nan):
        for i, init in enumerate(inits):
            for r in _rows(metric, values[i], names, lead_hours, q):
                r["init"] = init
                rows.append(r)

    add("fair_crps", fair_crps_per_date(ens, truth), labels)
    for q in brier_quantiles:
        add("fair_brier", _brier_pair(E, Y, grid, climatology, q), labels, q)
    add("energy_score", energy_score_per_date(ens, truth)[..., None], ["all"])
    return pd.DataFrame(rows, columns=PER_DATE_COLUMNS)


def skill_table(
    model: pd.DataFrame,
    reference: pd.DataFrame,
    reference_id: str = "reference",
    nonpositive: Literal["raise", "skip"] = "raise",
) -> pd.DataFrame:
    """
    Skill of every (metric, channel, lead_h, q) row of a report against a reference report.
    :param nonpositive: rows whose reference value is <= 0 have no skill score;
        "raise" rejects the reference, "skip" leaves them out with a warning each
    """
    if nonpositive not in ("raise", "skip"):
        raise ValidationError(f"unknown nonpositive policy {nonpositive!r}")
    keys = ["metric", "channel", "lead_h", "q"]
    m = model.copy()
    r = reference.copy()
    # NaN never matches in a merge
    m["q"] = m["q"].fillna(-1.0)
    r["q"] = r["q"].fillna(-1.0)
    merged = m.merge(r, on=keys, suffixes=("", "_ref"), how="inner")
    bad = merged[~(merged["value_ref"] > 0)]
    if len(bad) > 0:
        if nonpositive == "raise":
            first = bad.iloc[0]
            raise ValidationError(
                f"{len(bad)} reference rows are not positive, e.g. {first['metric']} "
                f"{first['channel']} lead {first['lead_h']}h = {first['value_ref']}"
            )
        for _, row in bad.iterrows():
            logger.warning(
                "No skill for %s %s lead %dh q=%s: reference value %s",
                row["metric"],
                row["channel"],
                row["lead_h"],
                row["q"] if row["q"] >= 0 else "-",
                row["value_ref"],
            )
        merged = merged[merged["value_ref"] > 0].copy()
    merged["skill"] = 1.0 - merged["value"] / merged["value_ref"]
    merged["q"] = merged["q"].where(merged["q"] >= 0)
    merged["reference"] = reference_id
    return merged[keys + ["value", "value_ref", "skill", "reference"]].reset_index(drop=True)


def average_skill(table: pd.DataFrame, metric: str, headline: Sequence[str]) -> pd.DataFrame:
    """
    Unweighted mean skill over the headline channels present in the table, per lead.
    :return: columns (metric, lead_h, skill, n_channels)
    """
    sub = table[(table["metric"] == metric) & table["channel"].isin(list(headline))]
    if sub.empty:
        raise ValidationError(f"no {metric} rows for headline channels {list(headline)}")
    out = (
        sub.groupby("lead_h")["skill"]
        .agg(["mean", "count"])
        .reset_index()
        .rename(columns={"mean": "skill", "count": "n_channels"})
    )
    out.insert(0, "metric", metric)
    return out
