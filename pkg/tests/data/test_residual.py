import numpy as np
import pytest

from fmsr.data.grid import Field, make_catalog, make_grid
from fmsr.data.regrid import coarsen, interpolate_up
from fmsr.data.residual import *
from fmsr.errors import MissingInputError, ValidationError


def test_decompose_reconstruct(plans, make_field, hr_grid, lr_grid):
    coarsen_plan, up = plans
    lr = make_field(lr_grid, seed=1)
    up_field, res = decompose(interpolate_up(lr, up), lr, up)
    assert np.all(res.data == 0.0)
    assert up_field.grid == hr_grid

    hr = make_field(hr_grid, seed=2, dtype=np.float32)
    lr = coarsen(hr, coarsen_plan)
    up_field, res = decompose(hr, lr, up)
    back = reconstruct(up_field, res)
    assert back.data.dtype == np.float32
    np.testing.assert_array_equal(back.data, hr.data)

    with pytest.raises(ValidationError):
        decompose(lr, lr, up)


def test_moment_accumulator_merge():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 2, 3, 4))
    b = rng.normal(loc=3.0, size=(7, 2, 3, 4))
    full = MomentAccumulator(2)
    for x in np.concatenate([a, b]):
        full.update(x)
    left, right = MomentAccumulator(2), MomentAccumulator(2)
    for x in a:
        left.update(x)
    for x in b:
        right.update(x)
    left.merge(right)
    assert left.count == full.count
    np.testing.assert_allclose(left.mean, full.mean, rtol=1e-12)
    np.testing.assert_allclose(left.std, full.std, rtol=1e-12)
    ref = np.concatenate([a, b]).transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(full.std, ref.std(axis=1), rtol=1e-12)


def _pairs(grid, catalog, values_x, values_r):
    return [
        (
            Field(grid=grid, channels=catalog, data=np.full((len(catalog),) + grid.shape, x)),
            Field(grid=grid, channels=catalog, data=np.full((len(catalog),) + grid.shape, r)),
        )
        for x, r in zip(values_x, values_r)
    ]


def test_fit_norm_stats():
    g = make_grid(2, 4)
    cat = make_catalog([("t2m", "surface")])
    stats = fit_norm_stats(_pairs(g, cat, [0.0, 2.0], [0.0, 2.0]))
    np.testing.assert_allclose(stats.mu_x, [1.0])
    np.testing.assert_allclose(stats.sigma_x, [1.0])
    np.testing.assert_allclose(stats.sigma_r, [1.0])
    assert stats.count == 2

    with pytest.raises(ValidationError, match="t2m"):
        fit_norm_stats(_pairs(g, cat, [1.0, 1.0], [0.0, 2.0]))
    with pytest.raises(ValidationError):
        fit_norm_stats(_pairs(g, cat, [0.0], [0.0]))


def test_normalize_round_trip(make_field, hr_grid, tmp_path):
    g = make_grid(2, 4)
    cat = make_catalog([("t2m", "surface")])
    stats = NormStats(
        labels=("t2m",),
        mu_x=np.array([2.0]),
        sigma_x=np.array([4.0]),
        mu_r=np.array([0.5]),
        sigma_r=np.array([0.25]),
        count=10,
    )
    f = Field(grid=g, channels=cat, data=np.full((1, 2, 4), 2.0))
    assert np.all(normalize(f, stats, "input").data == 0.0)
    f = Field(grid=g, channels=cat, data=np.full((1, 2, 4), 6.0))
    np.testing.assert_allclose(normalize(f, stats, "input").data, 1.0)

    rng = np.random.default_rng(0)
    f = Field(grid=g, channels=cat, data=rng.normal(size=(1, 2, 4)).astype(np.float32))
    back = denormalize(normalize(f, stats, "residual"), stats, "residual")
    np.testing.assert_allclose(back.data, f.data, rtol=1e-6, atol=1e-6)

    path = str(tmp_path / "stats.json")
    stats.to_json(path)
    loaded = NormStats.from_json(path)
    assert loaded.digest() == stats.digest()
    np.testing.assert_array_equal(loaded.sigma_r, stats.sigma_r)
    with pytest.raises(MissingInputError, match="fit-stats"):
        NormStats.from_json(str(tmp_path / "nope.json"), "run `fmsr fit-stats` first")

    other = Field(
        grid=g, channels=make_catalog([("sp", "surface")]), data=np.zeros((1, 2, 4))
    )
    with pytest.raises(ValidationError):
        normalize(other, stats, "input")


def test_make_sample_normalizes_training_set(plans, make_field, hr_grid):
    coarsen_plan, up = plans
    hrs = [make_field(hr_grid, seed=s, max_k=4) for s in range(6)]
    pairs = [(hr, coarsen(hr, coarsen_plan)) for hr in hrs]
    stats = fit_norm_stats(decompose(hr, lr, up) for hr, lr in pairs)
    samples = [make_sample(hr, lr, up, stats) for hr, lr in pairs]
    targets = np.stack([s.target.data for s in samples]).astype(np.float64)
    conds = np.stack([s.conditioning.data for s in samples]).astype(np.float64)
    for arr in (targets, conds):
        per_channel = arr.transpose(1, 0, 2, 3).reshape(arr.shape[1], -1)
        np.testing.assert_allclose(per_channel.mean(axis=1), 0.0, atol=1e-2)
        np.testing.assert_allclose(per_channel.std(axis=1), 1.0, atol=1e-2)
    assert samples[3].time_index == hrs[3].timestamp
