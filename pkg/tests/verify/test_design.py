import numpy as np
import pytest

from fmsr.data.grid import Trajectory
from fmsr.data.synth import build_climatology
from fmsr.errors import ValidationError
from fmsr.verify.design import *


def test_pattern_correlation(make_field, lr_grid):
    a = make_field(lr_grid, seed=1)
    np.testing.assert_allclose(pattern_correlation(a, a), 1.0)
    np.testing.assert_allclose(pattern_correlation(a, a.with_data(-2.0 * a.data + 3.0)), -1.0)
    b = make_field(lr_grid, seed=2)
    r = pattern_correlation(a, b)
    assert r.shape == (2,) and np.all(np.abs(r) <= 1.0)
    with pytest.raises(ValidationError):
        pattern_correlation(a, a.with_data(np.ones(a.data.shape)))


def test_activity_and_nrmse(make_field, lr_grid):
    lr = [make_field(lr_grid, seed=s, timestamp=s) for s in range(4)]
    np.testing.assert_allclose(activity_ratio(lr, lr), 1.0)
    doubled = [f.with_data(2.0 * f.data) for f in lr]
    np.testing.assert_allclose(activity_ratio(doubled, lr), 4.0)
    # adding a constant does not change the activity
    shifted = [f.with_data(f.data + 1.5) for f in lr]
    np.testing.assert_allclose(activity_ratio(shifted, lr), 1.0)

    sigma = np.array([0.5, 3.0])
    np.testing.assert_allclose(nrmse(lr, lr, sigma), 0.0)
    np.testing.assert_allclose(nrmse(shifted, lr, sigma), 1.5 / sigma)
    np.testing.assert_allclose(rmse_map(shifted, lr), 1.5)

    with pytest.raises(ValidationError):
        nrmse(lr, lr, np.array([1.0, 0.0]))
    with pytest.raises(ValidationError):
        activity_ratio(lr[:2], lr)
    with pytest.raises(ValidationError):
        activity([])


def test_activity_uses_climatology(make_field, lr_grid):
    fields = [make_field(lr_grid, seed=s % 2, timestamp=s) for s in range(6)]
    clim = build_climatology(fields, n_slots=2)
    # every field equals its slot mean, so no anomaly activity is left
    np.testing.assert_allclose(activity(fields, clim), 0.0, atol=1e-20)
    assert np.all(activity(fields) > 0)


def test_design_report(make_field, lr_grid):
    truth = [make_field(lr_grid, seed=s, timestamp=s) for s in range(6)]
    clim = build_climatology(truth)

    def traj(offset, seed):
        states = tuple(
            make_field(lr_grid, seed=seed + k, timestamp=k + 1).data + offset for k in range(2)
        )
        return Trajectory(
            init_time=0,
            states=tuple(truth[0].with_data(d) for d in states),
        )

    lr = [traj(0.0, 10), traj(0.0, 20), traj(0.0, 30)]
    sr_re = [traj(0.1, 10), traj(0.1, 20), traj(0.1, 30)]
    df = design_report(sr_re, lr, clim)
    assert list(df.columns) == DESIGN_COLUMNS
    assert len(df) == 2 * 2
    np.testing.assert_allclose(df["corr"], 1.0)
    np.testing.assert_allclose(df["activity_ratio"], 1.0)
    np.testing.assert_allclose(
        df["nrmse"], 0.1 / np.tile(clim.sigma_clim, 2), rtol=1e-10
    )
    assert (df["n_samples"] == 3).all()
    assert sorted(df["lead_h"].unique()) == [24, 48]

    with pytest.raises(ValidationError):
        design_report(sr_re[:2], lr, clim)
