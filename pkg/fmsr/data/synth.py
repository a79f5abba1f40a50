"""
Desk-scale data world: Gaussian random field truth, a toy stochastic forecast emulator and
climatology construction.
"""
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, confloat, validator

from fmsr.errors import ValidationError
from fmsr.model.parallel import parallel
from fmsr.model.utils import keyed_rng, split_times  # noqa: F401  (re-exported)
from .grid import ChannelCatalog, EnsembleSet, Field, GridSpec, Trajectory, area_mean

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES: Tuple[float, ...] = (0.01, 0.05, 0.10, 0.90, 0.95, 0.99)


def _as_list(v) -> List[float]:
    return list(v) if isinstance(v, (list, tuple)) else [v]


class GRFConfig(BaseModel):
    """
    Attributes:
        slope: zonal spectral slope, one value or one per channel (< 0)
        amplitude: pointwise standard deviation, one value or one per channel (> 0)
        phi: lag-1 autocorrelation of the temporal AR(1) process
        seed: root seed of all time-step substreams
    """

    slope: Union[float, List[float]] = -3.0
    amplitude: Union[float, List[float]] = 1.0
    phi: confloat(ge=0.0, lt=1.0) = 0.9
    seed: int = 0

    @validator("slope")
    def _slope_negative(cls, v):
        if any(s >= 0 for s in _as_list(v)):
            raise ValueError(f"spectral slope must be negative, got {v}")
        return v

    @validator("amplitude")
    def _amplitude_positive(cls, v):
        if any(a <= 0 for a in _as_list(v)):
            raise ValueError(f"amplitude must be positive, got {v}")
        return v

    def per_channel(self, name: str, n_channels: int) -> np.ndarray:
        vals = _as_list(getattr(self, name))
        if len(vals) == 1:
            vals = vals * n_channels
        if len(vals) != n_channels:
            raise ValidationError(
                f"{name} has {len(vals)} values for {n_channels} channels"
            )
        return np.asarray(vals, dtype=np.float64)


class ToyForecastModel(BaseModel):
    """
    Stochastic stand-in for an autoregressive forecast model on the coarse grid.
    Attributes:
        advection: zonal advection speed in grid cells per step
        relaxation: relaxation rate toward the slot climatology per step
        noise_scale: additive spectral noise per step, in units of the climatological std
        noise_slope: zonal spectral slope of the noise
    """

    advection: float = 0.5
    relaxation: confloat(ge=0.0, le=1.0) = 0.05
    noise_scale: confloat(ge=0.0) = 0.15
    noise_slope: confloat(lt=0.0) = -3.0
    seed: int = 0


def spectral_filter(grid: GridSpec, slopes: Sequence[float]) -> np.ndarray:
    """
    Square-root power filters [C, 2*n_lat, n_lon] on the latitude-doubled periodic
    domain; 2-D power goes as k**(slope - 1) so the zonal spectrum goes as k**slope.
    Each filter is scaled to give unit pointwise variance.
    """
    ky = np.fft.fftfreq(2 * grid.n_lat) * (2 * grid.n_lat)
    kx = np.fft.fftfreq(grid.n_lon) * grid.n_lon
    k = np.hypot(ky[:, None], kx[None, :])
    filters = []
    for slope in slopes:
        amp = np.zeros_like(k)
        amp[k > 0] = k[k > 0] ** ((slope - 1.0) / 2.0)
        amp /= np.sqrt(np.mean(amp**2))
        filters.append(amp)
    return np.stack(filters)


def spectral_noise(
    grid: GridSpec, filters: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Unit-variance Gaussian random fields [C, n_lat, n_lon] (float64)."""
    white = rng.standard_normal(filters.shape)
    g = np.fft.ifft2(np.fft.fft2(white) * filters).real
    return g[:, : grid.n_lat, :]


class _TruthNoise(object):
    def __init__(self, grid: GridSpec, filters: np.ndarray, seed: int):
        self.grid = grid
        self.filters = filters
        self.seed = seed

    def __call__(self, t: int) -> np.ndarray:
        return spectral_noise(self.grid, self.filters, keyed_rng(self.seed, t))


def generate_truth(
    grid: GridSpec,
    catalog: ChannelCatalog,
    cfg: GRFConfig,
    n_times: int,
    n_workers: int = 1,
) -> List[Field]:
    """
    Temporally AR(1)-correlated Gaussian random fields; innovation t is drawn from the
    (seed, t) substream, so the sequence does not depend on worker scheduling.
    :param n_times: # of time steps
    :param n_workers: # of worker processes for the spectral synthesis (default: 1)
    """
    if n_times < 1:
        raise ValidationError(f"n_times must be >= 1, got {n_times}")
    start = time.time()
    n_c = len(catalog)
    filters = spectral_filter(grid, cfg.per_channel("slope", n_c))
    amplitude = cfg.per_channel("amplitude", n_c)[:, None, None]
    innovations = parallel(
        _TruthNoise(grid, filters, cfg.seed),
        list(range(n_times)),
        n_workers=n_workers,
        desc="generate_truth",
    )
    phi = cfg.phi
    scale = np.sqrt(1.0 - phi**2)
    fields = []
    x = None
    for t, g in enumerate(innovations):
        x = g if x is None else phi * x + scale * g
        fields.append(
            Field(grid=grid, channels=catalog, data=amplitude * x, timestamp=t)
        )
    logger.info(
        "Generated %d truth fields on %s in %.2fs", n_times, grid, time.time() - start
    )
    return fields


@dataclass(frozen=True, eq=False)
class Climatology:
    """
    Attributes:
        slot_mean: [n_slots, C, lat, lon] mean state per time slot (time index % n_slots)
        quantile_levels: climatological quantile levels q
        quantiles: [Q, C, lat, lon] per-pixel empirical quantiles
        sigma_clim: [C] area-weighted climatological standard deviation per channel
    """

    grid: GridSpec
    channels: ChannelCatalog
    slot_mean: np.ndarray
    quantile_levels: Tuple[float, ...]
    quantiles: np.ndarray
    sigma_clim: np.ndarray

    @property
    def n_slots(self) -> int:
        return self.slot_mean.shape[0]

    def mean_for(self, time_index: Optional[int]) -> np.ndarray:
        if time_index is None:
            raise ValidationError("climatology lookup needs a timestamp")
        return self.slot_mean[time_index % self.n_slots]

    def quantile(self, q: float) -> np.ndarray:
        for i, level in enumerate(self.quantile_levels):
            if np.isclose(level, q):
                return self.quantiles[i]
        raise ValidationError(
            f"quantile {q} not in climatology levels {self.quantile_levels}"
        )


def build_climatology(
    truth: Sequence[Field],
    n_slots: int = 1,
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
) -> Climatology:
    """
    Slot means, per-pixel quantiles (linear interpolation of order statistics) and
    per-channel climatological standard deviation from a truth sample.
    A field is assigned to slot timestamp % n_slots (list position if it has no timestamp).
    """
    if len(truth) == 0:
        raise ValidationError("cannot build a climatology from an empty sample")
    if n_slots < 1:
        raise ValidationError(f"n_slots must be >= 1, got {n_slots}")
    if any(not 0.0 < q < 1.0 for q in quantiles):
        raise ValidationError(f"quantile levels must lie in (0, 1): {quantiles}")
    for f in truth[1:]:
        truth[0].check_compatible(f)
    stack = np.stack([f.data for f in truth]).astype(np.float64)
    slots = np.array(
        [
            (f.timestamp if f.timestamp is not None else i) % n_slots
            for i, f in enumerate(truth)
        ]
    )
    slot_mean = []
    for s in range(n_slots):
        members = stack[slots == s]
        if len(members) < 2:
            raise ValidationError(
                f"climatology slot {s} has {len(members)} samples, needs at least 2"
            )
        slot_mean.append(members.mean(axis=0))
    q_fields = np.quantile(stack, np.asarray(quantiles, dtype=np.float64), axis=0)
    mu = area_mean(stack, truth[0].grid).mean(axis=0)
    var = area_mean((stack - mu[None, :, None, None]) ** 2, truth[0].grid).mean(axis=0)
    return Climatology(
        grid=truth[0].grid,
        channels=truth[0].channels,
        slot_mean=np.stack(slot_mean),
        quantile_levels=tuple(float(q) for q in quantiles),
        quantiles=q_fields,
        sigma_clim=np.sqrt(var),
    )


def advect(data: np.ndarray, shift: float) -> np.ndarray:
    """Shift [..., lon] data eastward by a (fractional) number of cells via FFT phase."""
    n_lon = data.shape[-1]
    k = np.fft.rfftfreq(n_lon) * n_lon
    spec = np.fft.rfft(np.asarray(data, dtype=np.float64), axis=-1)
    return np.fft.irfft(spec * np.exp(-2j * np.pi * k * shift / n_lon), n=n_lon, axis=-1)


class ForecastStep(object):
    """
    One member's autoregressive step x -> (1 - r) * (advect(x) + noise) + r * climatology.
    Calls are counted; the k-th call draws its noise from (seed, init_time, member, k).
    """

    def __init__(
        self,
        model: ToyForecastModel,
        climatology: Climatology,
        member: int = 0,
        init_time: int = 0,
    ):
        self.model = model
        self.climatology = climatology
        self.member = member
        self.init_time = init_time
        self.lead = 0
        self._filters = spectral_filter(
            climatology.grid, [model.noise_slope] * len(climatology.channels)
        )

    def __call__(self, state: Field) -> Field:
        clim = self.climatology
        if state.grid != clim.grid or state.channels != clim.channels:
            raise ValidationError(
                f"forecast state on {state.grid} does not match climatology on {clim.grid}"
            )
        self.lead += 1
        valid = self.init_time + self.lead
        m = self.model
        x = advect(state.data, m.advection)
        if m.noise_scale > 0:
            rng = keyed_rng(m.seed, self.init_time, self.member, self.lead)
            noise = spectral_noise(clim.grid, self._filters, rng)
            x = x + m.noise_scale * clim.sigma_clim[:, None, None] * noise
        x = (1.0 - m.relaxation) * x + m.relaxation * clim.mean_for(valid)
        return Field(
            grid=state.grid,
            channels=state.channels,
            data=x.astype(state.data.dtype),
            timestamp=valid,
        )


def make_forecast_step(
    model: ToyForecastModel,
    climatology: Climatology,
    member: int = 0,
    init_time: int = 0,
) -> ForecastStep:
    return ForecastStep(model, climatology, member=member, init_time=init_time)


def emulate_forecast(
    init: Field,
    model: ToyForecastModel,
    climatology: Climatology,
    T: int,
    M: int,
) -> EnsembleSet:
    """
    Roll out M members for T steps from a coarse initial state.
    :param init: coarse-grid initial state; its timestamp is the initialization time
    """
    if T < 1 or M < 1:
        raise ValidationError(f"T and M must be >= 1, got T={T}, M={M}")
    if init.timestamp is None:
        raise ValidationError("the initial state needs a timestamp")
    init_time = init.timestamp
    members = []
    for i in range(M):
        step = make_forecast_step(model, climatology, member=i, init_time=init_time)
        states = []
        x = init
        for _ in range(T):
            x = step(x)
            states.append(x)
        members.append(Trajectory(init_time=init_time, states=tuple(states)))
    return EnsembleSet(members=tuple(members))
