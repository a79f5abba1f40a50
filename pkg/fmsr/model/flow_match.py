"""
Flow-matching objective, sigmoid-normal timestep schedule, area and level weighted loss,
training loop and the ODE sampler turning noise into normalized residuals.
"""
import logging
import time
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, confloat, conint
from scipy.special import expit
from tqdm.auto import tqdm

from fmsr.data.grid import ChannelCatalog, Field, GridSpec, area_mean
from fmsr.data.residual import ResidualSample
from fmsr.errors import NumericalError, ValidationError
from .diffnet import VelocityField, VelocityNet
from .utils import keyed_rng

logger = logging.getLogger(__name__)


class FMConfig(BaseModel):
    """
    Attributes:
        n_sample_steps: uniform ODE steps from tau=0 (noise) to tau=1
        integrator: "euler" or "heun"
        learning_rate: AdamW step size (0 freezes the parameters)
        beta1, beta2, weight_decay: AdamW hyperparameters
        n_steps: # of optimizer steps
        log_every: log the running loss every n steps
    """

    n_sample_steps: conint(ge=1) = 50
    integrator: Literal["euler", "heun"] = "euler"
    batch_size: conint(ge=1) = 8
    learning_rate: confloat(ge=0.0) = 3e-4
    beta1: confloat(ge=0.0, lt=1.0) = 0.9
    beta2: confloat(ge=0.0, lt=1.0) = 0.98
    weight_decay: confloat(ge=0.0) = 0.05
    n_steps: conint(ge=0) = 5000
    seed: conint(ge=0) = 0
    log_every: conint(ge=1) = 100


def timestep_from_normal(z: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    return expit(z)


def sample_timestep(
    rng: np.random.Generator, size: Optional[int] = None
) -> Union[float, np.ndarray]:
    """tau = sigmoid(z) with z ~ N(0, 1)."""
    return timestep_from_normal(rng.standard_normal(size))


@dataclass(frozen=True, eq=False)
class PathPoint:
    tau: float
    alpha: float
    sigma: float
    noisy: Field
    target_velocity: Field


def make_path_point(r0: Field, eps: Field, tau: float) -> PathPoint:
    """Linear path r_tau = tau * r0 + (1 - tau) * eps with velocity r0 - eps."""
    r0.check_compatible(eps)
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    alpha, sigma = float(tau), 1.0 - float(tau)
    a = r0.data.astype(np.float64)
    e = eps.data.astype(np.float64)
    noisy = alpha * a + sigma * e
    return PathPoint(
        tau=float(tau),
        alpha=alpha,
        sigma=sigma,
        noisy=r0.with_data(noisy.astype(r0.data.dtype)),
        target_velocity=r0.with_data((a - e).astype(r0.data.dtype)),
    )


def weighted_fm_loss(
    predicted: Field,
    target: Field,
    grid: Optional[GridSpec] = None,
    catalog: Optional[ChannelCatalog] = None,
) -> float:
    """
    Mean over channels of channel_weight * area-weighted mean squared error.
    """
    predicted.check_compatible(target)
    grid = grid or predicted.grid
    catalog = catalog or predicted.channels
    err2 = (predicted.data.astype(np.float64) - target.data.astype(np.float64)) ** 2
    per_channel = area_mean(err2, grid)
    return float(np.mean(catalog.channel_weight * per_channel))


def weighted_fm_loss_torch(
    predicted: torch.Tensor,
    target: torch.Tensor,
    band_weight: torch.Tensor,
    channel_weight: torch.Tensor,
) -> torch.Tensor:
    """Batch version of weighted_fm_loss, reduced in float64; [B, C, lat, lon] inputs."""
    err2 = (predicted.double() - target.double()) ** 2
    per_channel = err2.mean(dim=-1) @ band_weight
    return (per_channel * channel_weight).mean()


def _stack(fields: Sequence[Field], dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([f.data for f in fields]), dtype=dtype)


def train(
    samples: Sequence[ResidualSample],
    net: VelocityNet,
    cfg: FMConfig,
    progress_bar=tqdm,
) -> Tuple[VelocityNet, pd.DataFrame]:
    """
    Each step draws a batch, tau ~ sigmoid(N(0,1)) and eps ~ N(0, I) from the seeded
    stream, regresses the path velocity with the weighted loss and takes one AdamW step.
    :return: trained net (updated in place) and loss history with columns (step, loss)
    """
    if len(samples) == 0:
        raise ValidationError("cannot train on an empty sample set")
    first = samples[0].target
    if len(first.channels) != net.n_channels:
        raise ValidationError(
            f"net expects {net.n_channels} channels, samples have {len(first.channels)}"
        )
    for s in samples[1:]:
        first.check_compatible(s.target)
    dtype = net.dtype
    cond_all = _stack([s.conditioning for s in samples], dtype)
    tgt_all = _stack([s.target for s in samples], dtype)
    band = torch.as_tensor(first.grid.band_weight, dtype=torch.float64)
    cw = torch.as_tensor(first.channels.channel_weight, dtype=torch.float64)

    opt = torch.optim.AdamW(
        net.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    rng = keyed_rng(cfg.seed)
    n, b = len(samples), cfg.batch_size
    history: List[dict] = []
    running = 0.0
    start = time.time()
    net.train()
    with progress_bar(total=cfg.n_steps, desc="train") as t:
        for step in range(cfg.n_steps):
            idx = rng.integers(0, n, size=b)
            tau = torch.as_tensor(sample_timestep(rng, b), dtype=dtype)
            r0 = tgt_all[idx]
            eps = torch.as_tensor(rng.standard_normal(tuple(r0.shape)), dtype=dtype)
            tau_b = tau[:, None, None, None]
            noisy = tau_b * r0 + (1.0 - tau_b) * eps
            opt.zero_grad()
            pred = net.velocity(noisy, cond_all[idx], tau)
            loss = weighted_fm_loss_torch(pred, r0 - eps, band, cw)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss {value} at step {step}")
            loss.backward()
            opt.step()
            net.mark_updated()
            history.append({"step": step, "loss": value})
            running += value
            if (step + 1) % cfg.log_every == 0:
                logger.info(
                    "step %d/%d: mean loss %.6f (%.1fs)",
                    step + 1,
                    cfg.n_steps,
                    running / cfg.log_every,
                    time.time() - start,
                )
                running = 0.0
            t.update()
    net.eval()
    logger.info("Trained %d steps in %.2fs", cfg.n_steps, time.time() - start)
    return net, pd.DataFrame(history, columns=["step", "loss"])


def integrate(
    net: VelocityField, x: torch.Tensor, cond: torch.Tensor, cfg: FMConfig
) -> torch.Tensor:
    """Integrate dr/dtau = u(r, cond, tau) from tau=0 to 1 on a uniform grid."""
    n = cfg.n_sample_steps
    dt = 1.0 / n
    b = x.shape[0]
    with torch.no_grad():
        for i in range(n):
            tau = torch.full((b,), i / n, dtype=x.dtype)
            v1 = net.velocity(x, cond, tau)
            if cfg.integrator == "euler":
                x = x + dt * v1
            else:
                tau_next = torch.full((b,), (i + 1) / n, dtype=x.dtype)
                v2 = net.velocity(x + dt * v1, cond, tau_next)
                x = x + 0.5 * dt * (v1 + v2)
            if not torch.isfinite(x).all():
                raise NumericalError(
                    f"non-finite sampler state at step {i + 1}/{n} ({cfg.integrator})"
                )
    return x


def sample_residuals(
    net: VelocityField,
    conditioning: Sequence[Field],
    cfg: FMConfig,
    rngs: Sequence[np.random.Generator],
    noise: Optional[Sequence[Field]] = None,
) -> List[Field]:
    """
    Batched sampler: one noise draw per conditioning state from the matching rng.
    """
    if len(conditioning) != len(rngs):
        raise ValidationError("need one rng per conditioning state")
    if len(conditioning) == 0:
        return []
    for c in conditioning[1:]:
        conditioning[0].check_compatible(c)
    dtype = net.dtype
    shape = conditioning[0].data.shape
    if noise is None:
        eps = np.stack([rng.standard_normal(shape) for rng in rngs])
    else:
        for e, c in zip(noise, conditioning):
            e.check_compatible(c)
        eps = np.stack([e.data for e in noise])
    x = torch.as_tensor(eps, dtype=dtype)
    out = integrate(net, x, _stack(conditioning, dtype), cfg).cpu().numpy()
    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    return [c.with_data(o.astype(np_dtype)) for c, o in zip(conditioning, out)]


def sample_residual(
    net: VelocityField,
    conditioning: Field,
    cfg: FMConfig,
    rng: np.random.Generator,
    noise: Optional[Field] = None,
) -> Field:
    """
    Normalized residual for one conditioning state; noise overrides the draw from rng.
    """
    return sample_residuals(
        net, [conditioning], cfg, [rng], None if noise is None else [noise]
    )[0]
