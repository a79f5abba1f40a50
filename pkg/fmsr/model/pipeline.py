"""
Applying the learned stochastic inverse of the coarse-graining operator to forecasts:
post-processing of whole trajectories, the pipeline-integrated rollout that feeds
re-coarsened super-resolved states back into the forecast model, and zero-shot use on
high-resolution forecasts from a foreign source.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from fmsr.data.grid import EnsembleSet, Field, Trajectory
from fmsr.data.regrid import RegridPlan, coarsen, interpolate_up
from fmsr.data.residual import NormStats, denormalize, normalize, reconstruct
from fmsr.errors import ValidationError
from .diffnet import VelocityField
from .flow_match import FMConfig, sample_residual
from .parallel import parallel
from .utils import keyed_rng

logger = logging.getLogger(__name__)

ForecastStepFn = Callable[[Field], Field]


@dataclass(frozen=True, eq=False)
class SROperator:
    """
    Attributes:
        net: trained velocity network (or any velocity field)
        stats: normalization statistics the net was trained with
        plan_up: bicubic plan coarse -> fine
        plan_coarsen: conservative plan fine -> coarse used to build the training pairs
    """

    net: VelocityField
    stats: NormStats
    plan_up: RegridPlan
    plan_coarsen: RegridPlan
    cfg: FMConfig

    def __post_init__(self):
        if self.plan_up.mode != "bicubic_up" or self.plan_coarsen.mode != "conservative_coarsen":
            raise ValidationError("SROperator needs a bicubic and a conservative plan")
        if self.plan_up.src != self.plan_coarsen.dst or self.plan_up.dst != self.plan_coarsen.src:
            raise ValidationError(
                f"plans do not invert each other: up {self.plan_up.digest()}, "
                f"coarsen {self.plan_coarsen.digest()}"
            )
        n = getattr(self.net, "n_channels", len(self.stats.labels))
        if n != len(self.stats.labels):
            raise ValidationError(
                f"net has {n} channels, stats have {len(self.stats.labels)}"
            )


def super_resolve_state(
    op: SROperator,
    lr: Field,
    rng: np.random.Generator,
    noise: Optional[Field] = None,
) -> Field:
    """
    x_hr = up(x_lr) + denormalize(sample(normalize(up(x_lr)))).
    :param noise: overrides the initial noise draw (normalized residual units)
    """
    if lr.grid != op.plan_up.src:
        raise ValidationError(f"state on {lr.grid}, operator expects {op.plan_up.src}")
    up = interpolate_up(lr, op.plan_up)
    cond = normalize(up, op.stats, "input")
    r = sample_residual(op.net, cond, op.cfg, rng, noise)
    residual = denormalize(r, op.stats, "residual")
    return reconstruct(up, residual, dtype=lr.data.dtype)


def _lead_index(traj: Trajectory, position: int) -> int:
    ts = traj.states[position].timestamp
    if ts is None:
        return position
    lead = ts - traj.init_time - 1
    return lead if lead >= 0 else position


def super_resolve_trajectory(
    op: SROperator,
    traj: Trajectory,
    seed: int,
    member: int = 0,
    draw: int = 0,
) -> Trajectory:
    """
    Super-resolve every lead independently; lead k uses the (seed, member, k, draw) stream.
    """
    states = []
    for pos, state in enumerate(traj.states):
        rng = keyed_rng(seed, member, _lead_index(traj, pos), draw)
        states.append(super_resolve_state(op, state, rng))
    return Trajectory(
        init_time=traj.init_time,
        states=tuple(states),
        lead_step_hours=traj.lead_step_hours,
    )


class _MemberJob(object):
    def __init__(self, op: SROperator, seed: int, draw: int):
        self.op = op
        self.seed = seed
        self.draw = draw

    def __call__(self, args) -> Trajectory:
        member, traj = args
        return super_resolve_trajectory(self.op, traj, self.seed, member, self.draw)


def super_resolve_ensemble(
    op: SROperator,
    ens: EnsembleSet,
    seed: int,
    draw: int = 0,
    n_workers: int = 1,
) -> EnsembleSet:
    """Members are processed independently (optionally on a worker pool)."""
    members = parallel(
        _MemberJob(op, seed, draw),
        list(enumerate(ens.members)),
        n_workers=n_workers,
        desc="super_resolve",
    )
    return EnsembleSet(members=tuple(members))


def pipeline_integrated_step(
    op: SROperator,
    lr_state: Field,
    forecast_step: ForecastStepFn,
    rng: np.random.Generator,
) -> Field:
    """Next coarse state = forecast_step(coarsen(super_resolve_state(lr_state)))."""
    hr = super_resolve_state(op, lr_state, rng)
    return forecast_step(coarsen(hr, op.plan_coarsen))


def pipeline_integrated_rollout(
    op: SROperator,
    init: Field,
    forecast_step: ForecastStepFn,
    T: int,
    seed: int,
    member: int = 0,
) -> Trajectory:
    """
    T integrated steps from a coarse initial state; step k super-resolves with the
    (seed, member, k, 0) stream. Returns the coarse trajectory.
    """
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if init.timestamp is None:
        raise ValidationError("the initial state needs a timestamp")
    init_time = init.timestamp
    x = init
    states: List[Field] = []
    for k in range(T):
        x = pipeline_integrated_step(op, x, forecast_step, keyed_rng(seed, member, k, 0))
        states.append(x)
    return Trajectory(init_time=init_time, states=tuple(states))


def zero_shot_apply(
    op: SROperator,
    foreign_hr: Trajectory,
    seed: int,
    member: int = 0,
) -> Trajectory:
    """Re-coarsen a foreign high-resolution trajectory with the training plan, then super-resolve."""
    if foreign_hr.grid != op.plan_coarsen.src:
        raise ValidationError(
            f"foreign trajectory on {foreign_hr.grid}, expected {op.plan_coarsen.src}"
        )
    lr = Trajectory(
        init_time=foreign_hr.init_time,
        states=tuple(coarsen(s, op.plan_coarsen) for s in foreign_hr.states),
        lead_step_hours=foreign_hr.lead_step_hours,
    )
    return super_resolve_trajectory(op, lr, seed, member)


def smooth_spectrally(f: Field, cutoff_k: float, order: int = 2) -> Field:
    """
    Damp zonal wavenumber k by exp(-(k / cutoff_k) ** order); emulates an oversmoothing
    forecast source.
    """
    if cutoff_k <= 0:
        raise ValidationError(f"cutoff_k must be positive, got {cutoff_k}")
    n_lon = f.grid.n_lon
    k = np.fft.rfftfreq(n_lon) * n_lon
    spec = np.fft.rfft(f.data.astype(np.float64), axis=-1)
    out = np.fft.irfft(spec * np.exp(-((k / cutoff_k) ** order)), n=n_lon, axis=-1)
    return f.with_data(out.astype(f.data.dtype))
