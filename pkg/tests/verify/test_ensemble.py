import itertools

import numpy as np
import pandas as pd
import pytest
from scipy.stats import norm

from fmsr.data.grid import EnsembleSet, Trajectory, area_mean, as_fields, make_catalog, make_grid
from fmsr.data.synth import Climatology
from fmsr.errors import ValidationError
from fmsr.verify.ensemble import *

GRID = make_grid(2, 4)
ONE = make_catalog([("t2m", "surface")])


def _ensemble(E, grid=GRID, catalog=ONE, init=0):
    """E: [M, T, C, lat, lon]"""
    members = []
    for m in range(E.shape[0]):
        states = as_fields(E[m], grid, catalog, [init + k + 1 for k in range(E.shape[1])])
        members.append(Trajectory(init_time=init, states=tuple(states)))
    return EnsembleSet(members=tuple(members))


def _truth(Y, grid=GRID, catalog=ONE, init=0):
    """Y: [T, C, lat, lon]"""
    states = as_fields(Y, grid, catalog, [init + k + 1 for k in range(Y.shape[0])])
    return Trajectory(init_time=init, states=tuple(states))


def _constant_members(values, T=1):
    return np.stack([np.full((T, 1) + GRID.shape, float(v)) for v in values])


def _climatology(lo, hi, grid=GRID, catalog=ONE):
    shape = (len(catalog),) + grid.shape
    return Climatology(
        grid=grid,
        channels=catalog,
        slot_mean=np.zeros((1,) + shape),
        quantile_levels=(0.1, 0.9),
        quantiles=np.stack([np.broadcast_to(lo, shape), np.broadcast_to(hi, shape)]).astype(float),
        sigma_clim=np.ones(len(catalog)),
    )


def test_hand_examples():
    ens = _ensemble(_constant_members([0, 2]))
    truth = _truth(np.zeros((1, 1) + GRID.shape))
    assert fair_ens_mean_rmse(ens, truth)[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert ens_mean_rmse(ens, truth)[0, 0] == pytest.approx(1.0)

    ens = _ensemble(_constant_members([0, 1]))
    assert fair_crps(ens, truth)[0, 0] == pytest.approx(0.0, abs=1e-12)

    # one of two members exceeds the threshold: fair Brier is 0 whatever the outcome
    x = np.array([0.0, 2.0])
    for y in (0.0, 2.0):
        assert brier_kernel(x, np.array(y), np.array(1.0)) == pytest.approx(0.0, abs=1e-12)

    assert skill_score(0.9, 1.0) == pytest.approx(0.1)
    np.testing.assert_allclose(skill_score(np.array([0.5, 1.0]), np.array([1.0, 2.0])), [0.5, 0.5])
    with pytest.raises(ValidationError):
        skill_score(1.0, 0.0)


def test_fair_rmse_negative_radicand():
    ens = _ensemble(_constant_members([0, 2]))
    truth = _truth(np.ones((1, 1) + GRID.shape))
    with pytest.raises(ValidationError):
        fair_ens_mean_rmse(ens, truth)
    assert fair_ens_mean_rmse(ens, truth, negative="clip")[0, 0] == 0.0


def test_crps_kernel_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=3)
    m = x.shape[0]
    expected = np.zeros(3)
    for p in range(3):
        skill = np.mean([abs(x[i, p] - y[p]) for i in range(m)])
        spread = sum(abs(x[i, p] - x[j, p]) for i, j in itertools.product(range(m), repeat=2))
        expected[p] = skill - spread / (2 * m * (m - 1))
    np.testing.assert_allclose(crps_kernel(x, y), expected, atol=1e-10)
    with pytest.raises(ValidationError):
        crps_kernel(x[:1], y)


def test_energy_kernel_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    y = rng.normal(size=6)
    w = rng.random(6)
    s = np.sqrt(w)
    m = x.shape[0]
    skill = np.mean([np.linalg.norm(s * (x[i] - y)) for i in range(m)])
    spread = sum(
        np.linalg.norm(s * (x[i] - x[j])) for i, j in itertools.product(range(m), repeat=2)
    )
    expected = skill - spread / (2 * m * (m - 1))
    assert energy_kernel(x, y, w) == pytest.approx(expected, abs=1e-10)

    # a single component reduces to CRPS
    assert energy_kernel(x[:, :1], y[:1], np.ones(1)) == pytest.approx(
        float(crps_kernel(x[:, 0], y[0])), abs=1e-12
    )


def test_brier_kernel_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 10))
    y = rng.normal(size=10)
    thr = rng.normal(size=10) * 0.5
    p = (x > thr).sum(axis=0) / 6.0
    o = (y > thr).astype(float)
    np.testing.assert_allclose(brier_kernel(x, y, thr), (p - o) ** 2 - p * (1 - p) / 5, atol=1e-12)


def test_scores_match_brute_force():
    rng = np.random.default_rng(3)
    grid = make_grid(4, 8)
    cat = make_catalog([("t2m", "surface"), ("t", 850)])
    N, M, T = 3, 4, 2
    E = rng.normal(size=(N, M, T, 2) + grid.shape)
    Y = rng.normal(size=(N, T, 2) + grid.shape)
    ens = [_ensemble(E[i], grid, cat, init=10 * i) for i in range(N)]
    truth = [_truth(Y[i], grid, cat, init=10 * i) for i in range(N)]

    mean = E.mean(axis=1)
    err = area_mean((mean - Y) ** 2, grid)
    dev = area_mean(((E - mean[:, None]) ** 2).sum(axis=1), grid)
    radicand = (err - dev / (M * (M - 1))).mean(axis=0)
    got = fair_ens_mean_rmse(ens, truth, negative="clip")
    np.testing.assert_allclose(got, np.sqrt(np.maximum(radicand, 0)), atol=1e-10)

    crps = np.zeros((N, T, 2))
    for i, k, c in itertools.product(range(N), range(T), range(2)):
        crps[i, k, c] = area_mean(crps_kernel(E[i, :, k, c], Y[i, k, c]), grid)
    np.testing.assert_allclose(fair_crps_per_date(ens, truth), crps, atol=1e-10)
    np.testing.assert_allclose(fair_crps(ens, truth), crps.mean(axis=0), atol=1e-10)

    w = (cat.channel_weight[:, None, None] * grid.cell_area_weight[None, :, None]) * np.ones(
        (2,) + grid.shape
    )
    es = np.zeros((N, T))
    for i, k in itertools.product(range(N), range(T)):
        es[i, k] = energy_kernel(E[i, :, k].reshape(M, -1), Y[i, k].ravel(), w.ravel())
    np.testing.assert_allclose(energy_score_per_date(ens, truth), es, atol=1e-10)

    clim = _climatology(-1.0, 1.0, grid, cat)
    brier = 0.5 * (
        area_mean(brier_kernel(np.moveaxis(E, 1, 0), Y, -1.0), grid)
        + area_mean(brier_kernel(np.moveaxis(E, 1, 0), Y, 1.0), grid)
    )
    np.testing.assert_allclose(fair_brier(ens, truth, clim, 0.1), brier.mean(axis=0), atol=1e-10)
    with pytest.raises(ValidationError):
        fair_brier(ens, truth, clim, 0.05)
    with pytest.raises(ValidationError):
        fair_brier(ens, truth, _climatology(-1.0, 1.0), 0.1)


def test_spread_skill_ratio_of_exchangeable_ensemble():
    rng = np.random.default_rng(4)
    grid = make_grid(8, 16)
    N, M = 40, 10
    E = rng.normal(size=(N, M, 1, 1) + grid.shape)
    Y = rng.normal(size=(N, 1, 1) + grid.shape)
    ens = [_ensemble(E[i], grid, init=i) for i in range(N)]
    truth = [_truth(Y[i], grid, init=i) for i in range(N)]
    assert spread_skill_ratio(ens, truth)[0, 0] == pytest.approx(1.0, abs=0.05)

    # an under-dispersive ensemble has a ratio below one
    ens = [_ensemble(0.3 * E[i], grid, init=i) for i in range(N)]
    assert spread_skill_ratio(ens, truth)[0, 0] < 0.5


def test_input_validation():
    truth = _truth(np.zeros((2, 1) + GRID.shape))
    with pytest.raises(ValidationError):
        fair_crps(_ensemble(_constant_members([1.0], T=2)), truth)
    with pytest.raises(ValidationError):
        fair_crps(_ensemble(_constant_members([0, 1], T=3)), truth)
    with pytest.raises(ValidationError):
        fair_crps([_ensemble(_constant_members([0, 1], T=2))], [truth, truth])
    # a single member is enough for the plain ensemble-mean RMSE
    assert ens_mean_rmse(_ensemble(_constant_members([2.0], T=2)), truth).shape == (2, 1)
    # truth may run past the forecast
    assert fair_crps(_ensemble(_constant_members([0, 1], T=1)), truth).shape == (1, 1)
    with pytest.raises(ValidationError):
        spread_skill_ratio(_ensemble(_constant_members([-1, 1], T=2)), truth)


@pytest.fixture
def reports():
    rng = np.random.default_rng(5)
    N, M, T = 3, 3, 2
    E = rng.normal(size=(N, M, T, 1) + GRID.shape)
    Y = rng.normal(size=(N, T, 1) + GRID.shape)
    ens = [_ensemble(E[i], init=5 * i) for i in range(N)]
    truth = [_truth(Y[i], init=5 * i) for i in range(N)]
    clim = Climatology(
        grid=GRID,
        channels=ONE,
        slot_mean=np.zeros((1, 1) + GRID.shape),
        quantile_levels=(0.05, 0.1, 0.9, 0.95),
        quantiles=np.stack([np.full((1,) + GRID.shape, v) for v in (-1.6, -1.3, 1.3, 1.6)]),
        sigma_clim=np.ones(1),
    )
    return ens, truth, clim


def test_evaluate_ensemble(reports):
    ens, truth, clim = reports
    df = evaluate_ensemble(ens, truth, clim, brier_quantiles=[0.05, 0.1])
    assert list(df.columns) == REPORT_COLUMNS
    assert set(df["metric"]) == {
        "fair_ens_mean_rmse",
        "ens_mean_rmse",
        "fair_crps",
        "fair_brier",
        "spread_skill_ratio",
        "energy_score",
    }
    assert df.attrs == {"n_members": 3, "n_dates": 3}
    assert sorted(df["lead_h"].unique()) == [24, 48]
    brier = df[df["metric"] == "fair_brier"]
    assert sorted(brier["q"].unique()) == [0.05, 0.1]
    assert df[df["metric"] != "fair_brier"]["q"].isna().all()
    assert set(df[df["metric"] == "energy_score"]["channel"]) == {"all"}

    crps = df[(df["metric"] == "fair_crps")].sort_values("lead_h")["value"].values
    np.testing.assert_allclose(crps, fair_crps(ens, truth)[:, 0])


def test_per_date_scores(reports):
    ens, truth, clim = reports
    df = per_date_scores(ens, truth, clim, brier_quantiles=[0.1])
    assert list(df.columns) == PER_DATE_COLUMNS
    assert sorted(df["init"].unique()) == [0, 5, 10]
    rows = df[(df["metric"] == "fair_crps") & (df["lead_h"] == 48)].sort_values("init")
    np.testing.assert_allclose(rows["value"].values, fair_crps_per_date(ens, truth)[:, 1, 0])
    assert len(df[df["metric"] == "energy_score"]) == 3 * 2


def test_skill_table_and_average(reports):
    ens, truth, clim = reports
    model = evaluate_ensemble(ens, truth, clim, brier_quantiles=[0.1])
    reference = model.copy()
    reference["value"] = reference["value"] * 2.0
    table = skill_table(model, reference, "bicubic", nonpositive="skip")
    assert list(table.columns) == [
        "metric", "channel", "lead_h", "q", "value", "value_ref", "skill", "reference"
    ]
    positive = table[table["value_ref"] > 0]
    np.testing.assert_allclose(positive["skill"], 0.5)
    assert (table["reference"] == "bicubic").all()
    assert table[table["metric"] == "fair_brier"]["q"].notna().all()

    avg = average_skill(table, "fair_crps", ["t2m", "z500"])
    assert list(avg.columns) == ["metric", "lead_h", "skill", "n_channels"]
    np.testing.assert_allclose(avg["skill"], 0.5)
    assert (avg["n_channels"] == 1).all()
    with pytest.raises(ValidationError):
        average_skill(table, "fair_crps", ["z500"])


def test_skill_table_nonpositive_reference(reports, caplog):
    ens, truth, clim = reports
    model = evaluate_ensemble(ens, truth, clim, brier_quantiles=[0.1])
    reference = model.copy()
    reference["value"] = reference["value"].abs() + 1.0
    zero = (reference["metric"] == "fair_brier") & (reference["lead_h"] == 24)
    reference.loc[zero, "value"] = 0.0
    with pytest.raises(ValidationError):
        skill_table(model, reference)

    with caplog.at_level("WARNING", logger="fmsr.verify.ensemble"):
        table = skill_table(model, reference, nonpositive="skip")
    assert len(table) == len(model) - zero.sum()
    assert not ((table["metric"] == "fair_brier") & (table["lead_h"] == 24)).any()
    dropped = [r for r in caplog.records if "No skill for fair_brier" in r.getMessage()]
    assert len(dropped) == zero.sum()
    with pytest.raises(ValidationError):
        skill_table(model, reference, nonpositive="ignore")


def _gaussian_crps(mu, sigma, y):
    z = (y - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / np.sqrt(np.pi))


@pytest.mark.slow
def test_fair_crps_is_unbiased_in_ensemble_size():
    rng = np.random.default_rng(6)
    mu, sigma, n = 1.5, 2.0, 400000
    y = rng.normal(mu, sigma, size=n)
    small = crps_kernel(rng.normal(mu, sigma, size=(2, n)), y).mean()
    large = crps_kernel(rng.normal(mu, sigma, size=(10, n)), y).mean()
    assert small == pytest.approx(large, rel=0.01)
    # same-distribution truth: E|X - Y| - E|X - X'| / 2 = sigma / sqrt(pi)
    assert large == pytest.approx(sigma / np.sqrt(np.pi), rel=0.01)


@pytest.mark.slow
def test_fair_crps_matches_gaussian_crps():
    rng = np.random.default_rng(7)
    mu, sigma, n = -0.5, 1.3, 100000
    y = rng.normal(mu, sigma, size=n)
    estimate = crps_kernel(rng.normal(mu, sigma, size=(5, n)), y).mean()
    assert estimate == pytest.approx(_gaussian_crps(mu, sigma, y).mean(), rel=0.01)
