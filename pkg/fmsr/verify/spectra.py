"""
Zonal power spectra: per-row periodograms of the longitude series, averaged over latitude
bands with area weights and over samples (times, members).
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from fmsr.data.grid import EnsembleSet, Field, Trajectory
from fmsr.errors import ValidationError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
SPECTRUM_COLUMNS = ["channel", "k", "wavelength_km", "energy"]
RATIO_COLUMNS = ["channel", "k", "wavelength_km", "ratio", "above_cutoff"]


@dataclass(frozen=True, eq=False)
class Spectrum:
    """
    Attributes:
        k: zonal wavenumbers 0..n_lon//2 (cycles per 360 degrees)
        energy: [channel, k]; energy[:, 0] is the squared mean, the rest sums to the
            area-weighted zonal variance
        n_samples: # of fields averaged
    """

    k: np.ndarray
    energy: np.ndarray
    labels: List[str]
    n_samples: int = 1
    ref_lat: float = 0.0

    @property
    def wavelength_km(self) -> np.ndarray:
        circumference = 2.0 * np.pi * EARTH_RADIUS_KM * np.cos(np.deg2rad(self.ref_lat))
        with np.errstate(divide="ignore"):
            return np.where(self.k > 0, circumference / np.maximum(self.k, 1), np.inf)

    def channel(self, label: str) -> np.ndarray:
        try:
            return self.energy[self.labels.index(label)]
        except ValueError:
            raise ValidationError(f"unknown channel {label!r}, have {self.labels}")


def _row_energy(data: np.ndarray, band_weight: np.ndarray) -> np.ndarray:
    """[..., lat, lon] -> [..., n_lon//2 + 1]"""
    n_lon = data.shape[-1]
    coef = np.fft.rfft(data.astype(np.float64), axis=-1) / n_lon
    power = np.abs(coef) ** 2
    # one-sided: fold negative wavenumbers, except k=0 and the Nyquist line
    fold = np.full(power.shape[-1], 2.0)
    fold[0] = 1.0
    if n_lon % 2 == 0:
        fold[-1] = 1.0
    power = power * fold
    return np.einsum("...jk,j->...k", power, band_weight)


def zonal_power_spectrum(
    fields: Union[Field, Sequence[Field], Trajectory, EnsembleSet], ref_lat: float = 0.0
) -> Spectrum:
    """
    Spectrum of a field, or the sample mean over a sequence of fields / all states of a
    trajectory / all states of every ensemble member.
    """
    if isinstance(fields, Field):
        fields = [fields]
    elif isinstance(fields, Trajectory):
        fields = list(fields.states)
    elif isinstance(fields, EnsembleSet):
        fields = [s for m in fields.members for s in m.states]
    fields = list(fields)
    if len(fields) == 0:
        raise ValidationError("no fields to compute a spectrum from")
    first = fields[0]
    for f in fields[1:]:
        first.check_compatible(f)
    band = first.grid.band_weight
    total = np.zeros((len(first.channels), first.grid.n_lon // 2 + 1))
    for f in fields:
        total += _row_energy(f.data, band)
    return Spectrum(
        k=np.arange(total.shape[-1]),
        energy=total / len(fields),
        labels=list(first.channels.labels),
        n_samples=len(fields),
        ref_lat=ref_lat,
    )


def average_spectra(spectra: Iterable[Spectrum]) -> Spectrum:
    """Sample-count weighted mean of spectra computed on the same grid."""
    spectra = list(spectra)
    if len(spectra) == 0:
        raise ValidationError("no spectra to average")
    first = spectra[0]
    for s in spectra[1:]:
        if s.labels != first.labels or not np.array_equal(s.k, first.k):
            raise ValidationError("spectra must share channels and wavenumbers")
    counts = np.array([s.n_samples for s in spectra], dtype=np.float64)
    energy = np.tensordot(counts, np.stack([s.energy for s in spectra]), axes=1)
    return Spectrum(
        k=first.k,
        energy=energy / counts.sum(),
        labels=first.labels,
        n_samples=int(counts.sum()),
        ref_lat=first.ref_lat,
    )


def cutoff_wavenumber(coarse_n_lon: int) -> int:
    """Highest zonal wavenumber a coarse grid resolves."""
    return coarse_n_lon // 2


def spectrum_ratio(
    model: Spectrum,
    reference: Spectrum,
    coarse_n_lon: Optional[int] = None,
    k_min: int = 1,
) -> pd.DataFrame:
    """
    Elementwise model / reference energy for k >= k_min.
    :param coarse_n_lon: if given, rows with k above the coarse cutoff get above_cutoff=True
    """
    if model.labels != reference.labels or not np.array_equal(model.k, reference.k):
        raise ValidationError("spectra must share channels and wavenumbers")
    sel = model.k >= k_min
    ref = reference.energy[:, sel]
    if np.any(ref <= 0):
        c, i = np.argwhere(ref <= 0)[0]
        raise ValidationError(
            f"reference energy is zero for {reference.labels[c]} at k={model.k[sel][i]}"
        )
    ratio = model.energy[:, sel] / ref
    cutoff = np.inf if coarse_n_lon is None else cutoff_wavenumber(coarse_n_lon)
    k = model.k[sel]
    wl = model.wavelength_km[sel]
    rows = []
    for c, label in enumerate(model.labels):
        for i in range(len(k)):
            rows.append(
                {
                    "channel": label,
                    "k": int(k[i]),
                    "wavelength_km": wl[i],
                    "ratio": ratio[c, i],
                    "above_cutoff": bool(k[i] > cutoff),
                }
            )
    return pd.DataFrame(rows, columns=RATIO_COLUMNS)


def fit_spectral_slope(spec: Spectrum, k_min: int, k_max: int) -> np.ndarray:
    """Least-squares slope of log E against log k over [k_min, k_max], per channel."""
    if k_min < 1 or k_max <= k_min:
        raise ValidationError(f"need 1 <= k_min < k_max, got [{k_min}, {k_max}]")
    sel = (spec.k >= k_min) & (spec.k <= k_max)
    if sel.sum() < 2:
        raise ValidationError(f"fewer than two wavenumbers in [{k_min}, {k_max}]")
    e = spec.energy[:, sel]
    if np.any(e <= 0):
        raise ValidationError("cannot fit a slope through zero energy")
    logk = np.log(spec.k[sel].astype(np.float64))
    return np.array([np.polyfit(logk, np.log(row), 1)[0] for row in e])


def spectrum_frame(spec: Spectrum) -> pd.DataFrame:
    wl = spec.wavelength_km
    rows = [
        {"channel": label, "k": int(k), "wavelength_km": wl[i], "energy": spec.energy[c, i]}
        for c, label in enumerate(spec.labels)
        for i, k in enumerate(spec.k)
    ]
    return pd.DataFrame(rows, columns=SPECTRUM_COLUMNS)


def spectrum_report(spec: Spectrum, path: str, cutoff_k: Optional[int] = None) -> str:
    """Write the spectrum CSV; the first line is a '# cutoff_k=<k>' comment."""
    with open(path, "w") as f:
        f.write(f"# cutoff_k={'' if cutoff_k is None else int(cutoff_k)}\n")
        spectrum_frame(spec).to_csv(f, index=False)
    logger.info("Wrote spectrum (%d samples) to %s", spec.n_samples, path)
    return path


def read_spectrum_report(path: str) -> Spectrum:
    df = pd.read_csv(path, comment="#")
    labels = list(dict.fromkeys(df["channel"]))
    k = np.sort(df["k"].unique())
    energy = np.stack(
        [df[df["channel"] == label].sort_values("k")["energy"].to_numpy() for label in labels]
    )
    return Spectrum(k=k, energy=energy, labels=labels)
