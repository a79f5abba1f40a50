"""
Small conditional velocity network u(r_tau | conditioning, tau) on a lat-lon grid.

Residual convolutional blocks with circular padding in longitude and edge replication in
latitude; a sinusoidal timestep embedding enters the input as broadcast channels and
modulates every block through a per-channel scale and shift.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, conint, validator

from fmsr.errors import StaleTapeError, ValidationError
from fmsr.data.grid import Field

logger = logging.getLogger(__name__)


class ArchSpec(BaseModel):
    n_blocks: conint(ge=1) = 4
    width: conint(ge=1) = 32
    kernel: conint(ge=1) = 3
    t_embed: conint(ge=2) = 8

    @validator("kernel")
    def _odd_kernel(cls, v):
        if v % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {v}")
        return v

    @validator("t_embed")
    def _even_embed(cls, v):
        if v % 2 != 0:
            raise ValueError(f"timestep embedding size must be even, got {v}")
        return v


@runtime_checkable
class VelocityField(Protocol):
    """Anything the sampler can integrate: a velocity for a batch of noisy residuals."""

    dtype: torch.dtype

    def velocity(
        self, noisy: torch.Tensor, cond: torch.Tensor, tau: torch.Tensor
    ) -> torch.Tensor:
        ...


def timestep_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding [B, dim] of tau in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(1000.0) * torch.arange(half, dtype=tau.dtype, device=tau.device) / half
    )
    args = 1000.0 * tau[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _pad(x: torch.Tensor, p: int) -> torch.Tensor:
    if p == 0:
        return x
    x = F.pad(x, (p, p, 0, 0), mode="circular")
    return F.pad(x, (0, 0, p, p), mode="replicate")


class _Block(nn.Module):
    def __init__(self, width: int, kernel: int, t_embed: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, kernel)
        self.film = nn.Linear(t_embed, 2 * width)
        self.conv2 = nn.Conv2d(width, width, kernel)
        self.pad = kernel // 2

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(emb).chunk(2, dim=1)
        z = self.conv1(_pad(F.silu(h), self.pad))
        z = z * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        z = self.conv2(_pad(F.silu(z), self.pad))
        return h + z


class VelocityNet(nn.Module):
    """
    Attributes:
        arch: architecture descriptor
        n_channels: # of residual channels (conditioning has the same count)
    """

    def __init__(self, arch: ArchSpec, n_channels: int, seed: int = 0):
        super().__init__()
        if n_channels < 1:
            raise ValidationError(f"n_channels must be >= 1, got {n_channels}")
        self.arch = arch
        self.n_channels = n_channels
        k = arch.kernel
        self.inp = nn.Conv2d(2 * n_channels + arch.t_embed, arch.width, k)
        self.blocks = nn.ModuleList(
            [_Block(arch.width, k, arch.t_embed) for _ in range(arch.n_blocks)]
        )
        self.out = nn.Conv2d(arch.width, n_channels, k)
        self._version = 0
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0):
        """Zero-mean uniform init with bound 1/sqrt(fan_in); the output layer starts at zero."""
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.startswith("out."):
                p.zero_()
                continue
            owner = self.get_submodule(name.rsplit(".", 1)[0])
            w = owner.weight
            fan_in = w.shape[1] * (w[0, 0].numel() if w.dim() > 2 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_((torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 - 1) * bound)
        self.mark_updated()

    def mark_updated(self):
        """Invalidate every tape recorded against the previous parameter values."""
        self._version += 1

    @property
    def dtype(self) -> torch.dtype:
        return self.out.weight.dtype

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def velocity(
        self, noisy: torch.Tensor, cond: torch.Tensor, tau: torch.Tensor
    ) -> torch.Tensor:
        """
        :param noisy: [B, C, lat, lon] noisy normalized residuals
        :param cond: [B, C, lat, lon] normalized upsampled coarse states
        :param tau: [B] flow time in [0, 1]
        """
        b, _, h, w = noisy.shape
        emb = timestep_embedding(tau.to(noisy.dtype), self.arch.t_embed)
        x = torch.cat([noisy, cond, emb[:, :, None, None].expand(b, -1, h, w)], dim=1)
        p = self.arch.kernel // 2
        hid = self.inp(_pad(x, p))
        for block in self.blocks:
            hid = block(hid, emb)
        return self.out(_pad(F.silu(hid), p))

    def forward(
        self, noisy: torch.Tensor, cond: torch.Tensor, tau: torch.Tensor
    ) -> torch.Tensor:
        return self.velocity(noisy, cond, tau)

    def params_numpy(self) -> Dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().copy() for n, p in self.named_parameters()}

    @torch.no_grad()
    def load_params_numpy(self, params: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(params):
            raise ValidationError(
                f"parameter names do not match the architecture: "
                f"{sorted(set(own) ^ set(params))}"
            )
        for n, p in own.items():
            if tuple(params[n].shape) != tuple(p.shape):
                raise ValidationError(
                    f"parameter {n} has shape {params[n].shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.as_tensor(params[n], dtype=p.dtype))
        self.mark_updated()


@dataclass
class Tape(object):
    """Recorded graph of one forward pass, valid for a single backward."""

    output: Optional[torch.Tensor] = None
    net_id: Optional[int] = None
    version: Optional[int] = None
    consumed: bool = False


def _as_batch(f: Field, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(f.data), dtype=dtype)[None]


def forward(
    net: VelocityNet,
    noisy_residual: Field,
    conditioning: Field,
    tau: float,
    tape: Optional[Tape] = None,
) -> Field:
    """
    Predicted velocity for one state. Pass a fresh Tape to record the graph for backward().
    """
    noisy_residual.check_compatible(conditioning)
    if len(noisy_residual.channels) != net.n_channels:
        raise ValidationError(
            f"net expects {net.n_channels} channels, got {len(noisy_residual.channels)}"
        )
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    dtype = net.dtype
    tau_t = torch.tensor([tau], dtype=dtype)
    x = _as_batch(noisy_residual, dtype)
    c = _as_batch(conditioning, dtype)
    if tape is None:
        with torch.no_grad():
            out = net.velocity(x, c, tau_t)
    else:
        with torch.enable_grad():
            out = net.velocity(x, c, tau_t)
        tape.output, tape.net_id, tape.version = out, id(net), net._version
        tape.consumed = False
    data = out[0].detach().cpu().numpy()
    return noisy_residual.with_data(data if dtype == torch.float64 else data.astype(np.float32))


def backward(net: VelocityNet, tape: Tape, upstream_grad: Field) -> Dict[str, np.ndarray]:
    """
    Parameter gradients of sum(upstream_grad * output) for the recorded forward pass.
    """
    if tape.output is None or tape.consumed:
        raise StaleTapeError("tape was already used or never recorded")
    if tape.net_id != id(net) or tape.version != net._version:
        raise StaleTapeError("tape was recorded against different parameters")
    up = _as_batch(upstream_grad, tape.output.dtype)
    if up.shape != tape.output.shape:
        raise ValidationError(
            f"upstream gradient shape {tuple(up.shape)} does not match output "
            f"{tuple(tape.output.shape)}"
        )
    names: List[str] = []
    params: List[torch.Tensor] = []
    for n, p in net.named_parameters():
        names.append(n)
        params.append(p)
    grads = torch.autograd.grad(tape.output, params, grad_outputs=up, allow_unused=True)
    tape.consumed = True
    tape.output = None
    return {
        n: (np.zeros(tuple(p.shape)) if g is None else g.detach().cpu().numpy())
        for n, p, g in zip(names, params, grads)
    }
