"""
Run configuration: the [fmsr] tables of pyproject.toml, optionally overridden by a JSON
file and by command-line flags, validated with pydantic.
"""
import copy
import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ValidationError as PydanticValidationError, confloat, conint

from fmsr import CONFIG
from fmsr.data.grid import ChannelCatalog, GridSpec, make_catalog, make_grid
from fmsr.data.synth import DEFAULT_QUANTILES, GRFConfig, ToyForecastModel
from fmsr.errors import MissingInputError, ValidationError
from fmsr.model.diffnet import ArchSpec
from fmsr.model.flow_match import FMConfig

logger = logging.getLogger(__name__)

ARCH_KEYS = set(ArchSpec.__fields__)


class WorldConfig(BaseModel):
    """
    Attributes:
        hr_lat, hr_lon: high-resolution grid size
        factor: integer coarsening factor in both directions
        channels: (variable, level) pairs, level in hPa or "surface"
        phi: lag-1 autocorrelation of the synthetic truth
        n_slots: # of climatology time slots
    """

    hr_lat: conint(ge=2) = 48
    hr_lon: conint(ge=4) = 96
    factor: conint(ge=1) = 6
    channels: List[Tuple[str, Union[int, str]]] = [
        ("t2m", "surface"),
        ("sp", "surface"),
        ("q", 700),
        ("t", 850),
        ("u", 850),
        ("z", 500),
    ]
    n_train: conint(ge=1) = 800
    n_val: conint(ge=0) = 100
    n_test: conint(ge=0) = 100
    slope: Union[float, List[float]] = -3.0
    amplitude: Union[float, List[float]] = 1.0
    phi: confloat(ge=0.0, lt=1.0) = 0.9
    n_slots: conint(ge=1) = 4
    quantiles: List[confloat(gt=0.0, lt=1.0)] = list(DEFAULT_QUANTILES)

    @property
    def n_times(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def grids(self) -> Tuple[GridSpec, GridSpec]:
        """:return: (high-resolution grid, coarse grid)"""
        if self.hr_lat % self.factor or self.hr_lon % self.factor:
            raise ValidationError(
                f"grid {self.hr_lat}x{self.hr_lon} is not divisible by factor {self.factor}"
            )
        hr = make_grid(self.hr_lat, self.hr_lon)
        lr = make_grid(self.hr_lat // self.factor, self.hr_lon // self.factor)
        return hr, lr

    def catalog(self) -> ChannelCatalog:
        return make_catalog(self.channels)

    def grf(self, seed: int) -> GRFConfig:
        return GRFConfig(slope=self.slope, amplitude=self.amplitude, phi=self.phi, seed=seed)


class ForecastConfig(BaseModel):
    n_inits: conint(ge=1) = 20
    n_members: conint(ge=1) = 4
    n_leads: conint(ge=1) = 10
    advection: float = 0.5
    relaxation: confloat(ge=0.0, le=1.0) = 0.05
    noise_scale: confloat(ge=0.0) = 0.15
    noise_slope: confloat(lt=0.0) = -3.0

    def model(self, seed: int) -> ToyForecastModel:
        return ToyForecastModel(
            advection=self.advection,
            relaxation=self.relaxation,
            noise_scale=self.noise_scale,
            noise_slope=self.noise_slope,
            seed=seed,
        )


class VerifyConfig(BaseModel):
    """
    Attributes:
        headline: channels averaged into headline skill scores (missing ones are skipped)
        brier_quantiles: lower quantiles q; each is paired with 1 - q
    """

    headline: List[str] = ["z500", "q700", "t850", "u850", "v850", "t2m", "sp", "u10m", "v10m"]
    brier_quantiles: List[confloat(gt=0.0, lt=0.5)] = [0.01, 0.05, 0.10]
    n_resamples: conint(ge=1000) = 4000
    level: confloat(gt=0.0, lt=1.0) = 0.95


class RunConfig(BaseModel):
    seed: conint(ge=0) = 0
    threads: conint(ge=1) = 1
    model_path: str = "models/"
    data_path: str = "data/"
    world: WorldConfig = WorldConfig()
    train: FMConfig = FMConfig()
    arch: ArchSpec = ArchSpec()
    forecast: ForecastConfig = ForecastConfig()
    verify: VerifyConfig = VerifyConfig()


def _deep_update(base: Dict[str, Any], other: Dict[str, Any]) -> Dict[str, Any]:
    for k, v in other.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _from_pyproject(config: Dict[str, Any]) -> Dict[str, Any]:
    """Reshape the [fmsr] tables: [fmsr.train] holds both optimizer and architecture keys."""
    raw = copy.deepcopy(config.get("fmsr", {}))
    train = raw.pop("train", {})
    raw["train"] = {k: v for k, v in train.items() if k not in ARCH_KEYS}
    raw["arch"] = {k: v for k, v in train.items() if k in ARCH_KEYS}
    return raw


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    config: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Merge pyproject defaults < JSON file < overrides.
    :param path: JSON file with the RunConfig layout (partial documents are fine)
    :param overrides: nested dict, e.g. {"seed": 3, "train": {"n_steps": 10}}
    :param config: parsed pyproject (default: fmsr.CONFIG)
    """
    merged = _from_pyproject(CONFIG if config is None else config)
    if path is not None:
        if not os.path.exists(path):
            raise MissingInputError(f"missing config file {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                _deep_update(merged, json.load(f))
            except json.JSONDecodeError as e:
                raise ValidationError(f"config file {path} is not valid JSON: {e}")
    if overrides:
        _deep_update(merged, overrides)
    train_seed = merged.get("train", {}).get("seed")
    if train_seed is None and "seed" in merged:
        merged.setdefault("train", {})["seed"] = merged["seed"]
    try:
        cfg = RunConfig(**merged)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid configuration: {e}")
    logger.debug("run config: %s", cfg.json())
    return cfg
