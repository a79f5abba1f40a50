"""
Equiangular lat-lon grids, channel catalogs and the field containers every other module
works with.
"""
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from fmsr.errors import ValidationError

Level = Union[int, str]
SURFACE: str = "surface"


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridSpec:
    """
    Cell-centered equiangular grid covering the sphere.
    Attributes:
        lat_centers, lon_centers: cell centers in degrees, no pole points.
        cell_area_weight: per latitude band weight of ONE cell, normalized so that
            sum_j cell_area_weight[j] * n_lon == 1.
    """

    n_lat: int
    n_lon: int
    lat_centers: np.ndarray
    lon_centers: np.ndarray
    cell_area_weight: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_lat, self.n_lon

    @property
    def dlat(self) -> float:
        return 180.0 / self.n_lat

    @property
    def dlon(self) -> float:
        return 360.0 / self.n_lon

    @property
    def band_weight(self) -> np.ndarray:
        """Latitude-band weights summing to one (cell weight times n_lon)."""
        return self.cell_area_weight * self.n_lon

    def digest(self) -> str:
        return hashlib.sha256(f"grid:{self.n_lat}x{self.n_lon}".encode()).hexdigest()[
            :16
        ]

    def to_dict(self) -> dict:
        return {"n_lat": self.n_lat, "n_lon": self.n_lon}

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridSpec):
            return NotImplemented
        return self.n_lat == other.n_lat and self.n_lon == other.n_lon

    def __hash__(self) -> int:
        return hash((self.n_lat, self.n_lon))

    def __repr__(self) -> str:
        return f"GridSpec({self.n_lat}x{self.n_lon})"


def make_grid(n_lat: int, n_lon: int) -> GridSpec:
    """
    Build a cell-centered equiangular grid.
    :param n_lat: number of latitude bands (even, >= 2)
    :param n_lon: number of longitudes (>= 4)
    """
    if n_lat < 2 or n_lat % 2 != 0:
        raise ValidationError(f"n_lat must be even and >= 2, got {n_lat}")
    if n_lon < 4:
        raise ValidationError(f"n_lon must be >= 4, got {n_lon}")
    dlat = 180.0 / n_lat
    dlon = 360.0 / n_lon
    lat = -90.0 + dlat * (np.arange(n_lat, dtype=np.float64) + 0.5)
    lon = dlon * (np.arange(n_lon, dtype=np.float64) + 0.5)
    edges = np.deg2rad(-90.0 + dlat * np.arange(n_lat + 1, dtype=np.float64))
    band = np.diff(np.sin(edges))
    weight = band / (band.sum() * n_lon)
    return GridSpec(
        n_lat=n_lat,
        n_lon=n_lon,
        lat_centers=_readonly(lat),
        lon_centers=_readonly(lon),
        cell_area_weight=_readonly(weight),
    )


def area_mean(arr: np.ndarray, grid: GridSpec) -> np.ndarray:
    """
    Area-weighted mean over the two trailing (lat, lon) axes, accumulated in float64.
    """
    arr = np.asarray(arr)
    if arr.shape[-2:] != grid.shape:
        raise ValidationError(
            f"array trailing shape {arr.shape[-2:]} does not match grid {grid.shape}"
        )
    zonal = arr.astype(np.float64).mean(axis=-1)
    return zonal @ grid.band_weight


@dataclass(frozen=True, eq=False)
class ChannelCatalog:
    """
    Ordered (variable, level) channels with their loss weights.
    Attributes:
        entries: (variable, level) pairs, level in hPa or "surface".
        level_weight: strictly positive per-channel weight.
        variable_weight: fixed to one for every channel.
    """

    entries: Tuple[Tuple[str, Level], ...]
    level_weight: np.ndarray
    variable_weight: np.ndarray = field(default=None)

    def __post_init__(self):
        entries = tuple((str(v), _parse_level(l)) for v, l in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(set(entries)) != len(entries):
            raise ValidationError(f"duplicate channels in catalog: {entries}")
        lw = np.asarray(self.level_weight, dtype=np.float64)
        if lw.shape != (len(entries),) or np.any(lw <= 0) or not np.all(np.isfinite(lw)):
            raise ValidationError(f"level weights must be positive per channel: {lw}")
        object.__setattr__(self, "level_weight", _readonly(lw))
        vw = self.variable_weight
        vw = np.ones(len(entries)) if vw is None else np.asarray(vw, dtype=np.float64)
        if vw.shape != (len(entries),) or np.any(vw != 1.0):
            raise ValidationError("variable weights are fixed to 1")
        object.__setattr__(self, "variable_weight", _readonly(vw))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> List[str]:
        return [channel_label(v, l) for v, l in self.entries]

    @property
    def channel_weight(self) -> np.ndarray:
        return self.level_weight * self.variable_weight

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"unknown channel {label!r}, have {self.labels}")

    def to_dict(self) -> dict:
        return {
            "entries": [[v, l] for v, l in self.entries],
            "level_weight": [float(x) for x in self.level_weight],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelCatalog":
        return cls(
            entries=tuple((v, l) for v, l in d["entries"]),
            level_weight=np.asarray(d["level_weight"], dtype=np.float64),
        )

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelCatalog):
            return NotImplemented
        return self.entries == other.entries and np.array_equal(
            self.level_weight, other.level_weight
        )

    def __hash__(self) -> int:
        return hash(self.entries)


def _parse_level(level: Level) -> Level:
    if isinstance(level, str):
        if level == SURFACE:
            return SURFACE
        try:
            level = int(level)
        except ValueError:
            raise ValidationError(f"invalid level {level!r}")
    level = int(level)
    if level <= 0:
        raise ValidationError(f"pressure level must be positive, got {level}")
    return level


def channel_label(variable: str, level: Level) -> str:
    return variable if level == SURFACE else f"{variable}{level}"


def make_catalog(
    entries: Iterable[Sequence], level_weight: Optional[Sequence[float]] = None
) -> ChannelCatalog:
    """
    Build a catalog in canonical order: surface variables first, then upper-air
    channels sorted by (variable, ascending pressure).
    Default level weights are proportional to pressure (air density at fixed
    temperature), normalized to mean one over upper-air channels; surface channels get 1.
    """
    parsed = [(str(v), _parse_level(l)) for v, l in entries]
    if level_weight is not None:
        if len(level_weight) != len(parsed):
            raise ValidationError("level_weight must match the number of entries")
        lookup = dict(zip(parsed, level_weight))
    surface = sorted(e for e in parsed if e[1] == SURFACE)
    upper = sorted((e for e in parsed if e[1] != SURFACE), key=lambda e: (e[0], e[1]))
    ordered = surface + upper
    if level_weight is not None:
        weights = np.array([lookup[e] for e in ordered], dtype=np.float64)
    else:
        weights = np.ones(len(ordered))
        if upper:
            p = np.array([e[1] for e in upper], dtype=np.float64)
            weights[len(surface) :] = p / p.mean()
    return ChannelCatalog(entries=tuple(ordered), level_weight=weights)


def default_catalog() -> ChannelCatalog:
    return make_catalog(
        [("t2m", SURFACE), ("sp", SURFACE), ("q", 700), ("t", 850), ("u", 850), ("z", 500)]
    )


@dataclass(frozen=True, eq=False)
class Field:
    """
    A channel-stacked state on a grid: data has shape [channel, lat, lon].
    Data is float32 unless float64 is passed explicitly.
    """

    grid: GridSpec
    channels: ChannelCatalog
    data: np.ndarray
    timestamp: Optional[int] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.float64:
            data = data.astype(np.float32)
        expected = (len(self.channels), self.grid.n_lat, self.grid.n_lon)
        if data.shape != expected:
            raise ValidationError(
                f"field shape {data.shape} does not match catalog/grid {expected}"
            )
        if not np.all(np.isfinite(data)):
            bad = [
                self.channels.labels[c]
                for c in range(len(self.channels))
                if not np.all(np.isfinite(data[c]))
            ]
            raise ValidationError(f"field has non-finite values in channels {bad}")
        object.__setattr__(self, "data", _readonly(data))

    def with_data(self, data: np.ndarray, grid: Optional[GridSpec] = None) -> "Field":
        return Field(
            grid=grid or self.grid,
            channels=self.channels,
            data=data,
            timestamp=self.timestamp,
        )

    def check_compatible(self, other: "Field") -> None:
        if self.grid != other.grid:
            raise ValidationError(f"grid mismatch: {self.grid} vs {other.grid}")
        if self.channels != other.channels:
            raise ValidationError(
                f"catalog mismatch: {self.channels.labels} vs {other.channels.labels}"
            )


def weighted_mean(f: Field) -> np.ndarray:
    """Area-weighted global mean per channel (float64)."""
    return area_mean(f.data, f.grid)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Lead-time indexed states of one forecast, states[k] valid at init + (k+1) * step."""

    init_time: int
    states: Tuple[Field, ...]
    lead_step_hours: int = 24

    def __post_init__(self):
        states = tuple(self.states)
        if len(states) < 1:
            raise ValidationError("a trajectory needs at least one state")
        for s in states[1:]:
            states[0].check_compatible(s)
        object.__setattr__(self, "states", states)

    @property
    def T(self) -> int:
        return len(self.states)

    @property
    def grid(self) -> GridSpec:
        return self.states[0].grid

    @property
    def channels(self) -> ChannelCatalog:
        return self.states[0].channels

    @property
    def lead_hours(self) -> List[int]:
        return [(k + 1) * self.lead_step_hours for k in range(self.T)]

    def stack(self) -> np.ndarray:
        """[T, C, lat, lon]"""
        return np.stack([s.data for s in self.states])


@dataclass(frozen=True, eq=False)
class EnsembleSet:
    members: Tuple[Trajectory, ...]

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 1:
            raise ValidationError("an ensemble needs at least one member")
        first = members[0]
        for m in members[1:]:
            if m.init_time != first.init_time or m.T != first.T:
                raise ValidationError("ensemble members must share init_time and T")
            first.states[0].check_compatible(m.states[0])
        object.__setattr__(self, "members", members)

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def T(self) -> int:
        return self.members[0].T

    @property
    def init_time(self) -> int:
        return self.members[0].init_time

    @property
    def grid(self) -> GridSpec:
        return self.members[0].grid

    @property
    def channels(self) -> ChannelCatalog:
        return self.members[0].channels

    def stack(self) -> np.ndarray:
        """[M, T, C, lat, lon]"""
        return np.stack([m.stack() for m in self.members])


def as_fields(
    arr: np.ndarray,
    grid: GridSpec,
    channels: ChannelCatalog,
    timestamps: Optional[Sequence[Optional[int]]] = None,
) -> List[Field]:
    """Split a [T, C, lat, lon] array into fields."""
    if timestamps is None:
        timestamps = [None] * len(arr)
    return [
        Field(grid=grid, channels=channels, data=a, timestamp=t)
        for a, t in zip(arr, timestamps)
    ]
