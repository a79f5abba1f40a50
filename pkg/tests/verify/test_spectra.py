import numpy as np
import pandas as pd
import pytest

from fmsr.data.grid import EnsembleSet, Field, Trajectory, area_mean, make_catalog, make_grid
from fmsr.errors import ValidationError
from fmsr.verify.spectra import *

GRID = make_grid(6, 16)
ONE = make_catalog([("t2m", "surface")])


def _field(data, grid=GRID, catalog=ONE, timestamp=None):
    data = np.broadcast_to(data, (len(catalog),) + grid.shape)
    return Field(grid=grid, channels=catalog, data=np.array(data, dtype=np.float64), timestamp=timestamp)


def test_constant_field_has_only_mean_energy():
    spec = zonal_power_spectrum(_field(np.full(GRID.shape, 2.0)))
    assert spec.energy.shape == (1, 9)
    assert spec.energy[0, 0] == pytest.approx(4.0)
    np.testing.assert_allclose(spec.energy[0, 1:], 0.0, atol=1e-24)
    assert np.isinf(spec.wavelength_km[0])


def test_single_harmonic():
    lon = np.deg2rad(GRID.lon_centers)
    spec = zonal_power_spectrum(_field(np.cos(3 * lon + 0.4)[None, :]))
    assert int(np.argmax(spec.energy[0])) == 3
    assert spec.energy[0, 3] == pytest.approx(0.5, rel=1e-12)
    np.testing.assert_allclose(np.delete(spec.energy[0], 3), 0.0, atol=1e-24)
    assert spec.wavelength_km[3] == pytest.approx(2 * np.pi * EARTH_RADIUS_KM / 3)

    # the Nyquist line is not doubled
    nyquist = np.cos(np.pi * np.arange(GRID.n_lon))
    assert zonal_power_spectrum(_field(nyquist[None, :])).energy[0, -1] == pytest.approx(1.0)


def test_parseval_and_invariances():
    rng = np.random.default_rng(0)
    cat = make_catalog([("t2m", "surface"), ("t", 850)])
    data = rng.normal(size=(2,) + GRID.shape)
    f = _field(data, catalog=cat)
    spec = zonal_power_spectrum(f)
    np.testing.assert_allclose(spec.energy.sum(axis=1), area_mean(data**2, GRID), rtol=1e-12)

    rolled = zonal_power_spectrum(f.with_data(np.roll(data, 5, axis=-1)))
    np.testing.assert_allclose(rolled.energy, spec.energy, rtol=1e-10)
    scaled = zonal_power_spectrum(f.with_data(3.0 * data))
    np.testing.assert_allclose(scaled.energy, 9.0 * spec.energy, rtol=1e-12)
    np.testing.assert_array_equal(spec.channel("t850"), spec.energy[1])
    with pytest.raises(ValidationError):
        spec.channel("z500")


def test_sample_averages():
    rng = np.random.default_rng(1)
    fields = [_field(rng.normal(size=GRID.shape), timestamp=t + 1) for t in range(4)]
    mean = zonal_power_spectrum(fields)
    assert mean.n_samples == 4
    np.testing.assert_allclose(
        mean.energy, np.mean([zonal_power_spectrum(f).energy for f in fields], axis=0)
    )

    traj = Trajectory(init_time=0, states=tuple(fields))
    np.testing.assert_allclose(zonal_power_spectrum(traj).energy, mean.energy)
    ens = EnsembleSet(members=(traj, Trajectory(init_time=0, states=tuple(fields[::-1]))))
    assert zonal_power_spectrum(ens).n_samples == 8
    np.testing.assert_allclose(zonal_power_spectrum(ens).energy, mean.energy)

    combined = average_spectra([zonal_power_spectrum(fields[:1]), zonal_power_spectrum(fields[1:])])
    assert combined.n_samples == 4
    np.testing.assert_allclose(combined.energy, mean.energy, rtol=1e-12)

    with pytest.raises(ValidationError):
        zonal_power_spectrum([])


def test_spectrum_ratio():
    rng = np.random.default_rng(2)
    spec = zonal_power_spectrum(_field(rng.normal(size=GRID.shape)))
    df = spectrum_ratio(spec, spec, coarse_n_lon=8)
    assert list(df.columns) == RATIO_COLUMNS
    assert df["k"].min() == 1 and df["k"].max() == 8
    np.testing.assert_allclose(df["ratio"], 1.0)
    assert cutoff_wavenumber(8) == 4
    np.testing.assert_array_equal(df["above_cutoff"], df["k"] > 4)

    flat = zonal_power_spectrum(_field(np.zeros(GRID.shape)))
    with pytest.raises(ValidationError, match="t2m"):
        spectrum_ratio(spec, flat)


def test_fit_spectral_slope():
    k = np.arange(9)
    energy = np.where(k > 0, 2.0 * np.maximum(k, 1) ** -3.0, 1.0)[None, :]
    spec = Spectrum(k=k, energy=energy, labels=["t2m"])
    np.testing.assert_allclose(fit_spectral_slope(spec, 1, 8), [-3.0], atol=1e-12)
    with pytest.raises(ValidationError):
        fit_spectral_slope(spec, 0, 4)
    with pytest.raises(ValidationError):
        fit_spectral_slope(spec, 4, 4)


def test_spectrum_report(tmp_path):
    rng = np.random.default_rng(3)
    spec = zonal_power_spectrum(_field(rng.normal(size=GRID.shape)))
    path = spectrum_report(spec, str(tmp_path / "spectrum.csv"), cutoff_k=4)
    with open(path) as f:
        assert f.readline().strip() == "# cutoff_k=4"
    df = pd.read_csv(path, comment="#")
    assert list(df.columns) == SPECTRUM_COLUMNS
    back = read_spectrum_report(path)
    assert back.labels == ["t2m"]
    np.testing.assert_array_equal(back.k, spec.k)
    np.testing.assert_allclose(back.energy, spec.energy, rtol=1e-12)
