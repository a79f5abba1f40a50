"""
Coarse-graining (first-order conservative) and bicubic upsampling between nested grids.
"""
import logging
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from fmsr.errors import ValidationError
from .grid import Field, GridSpec

logger = logging.getLogger(__name__)

RegridMode = Literal["conservative_coarsen", "bicubic_up"]

# Catmull-Rom
CUBIC_A: float = -0.5


@dataclass(frozen=True, eq=False)
class RegridPlan:
    """
    Precomputed regridding between two nested grids.
    For conservative plans, lat_matrix holds fine band weights [n_coarse_lat, factor_lat];
    for bicubic plans, lat_matrix [dst_lat, src_lat] and lon_matrix [dst_lon, src_lon]
    are the separable interpolation stencils.
    """

    src: GridSpec
    dst: GridSpec
    mode: RegridMode
    factor: Tuple[int, int]
    lat_matrix: np.ndarray
    lon_matrix: np.ndarray

    def digest(self) -> str:
        return f"{self.mode}:{self.src.digest()}->{self.dst.digest()}"


def _integer_factor(big: GridSpec, small: GridSpec) -> Tuple[int, int]:
    if big.n_lat % small.n_lat != 0 or big.n_lon % small.n_lon != 0:
        raise ValidationError(f"grids do not nest: {big} and {small}")
    fa, fo = big.n_lat // small.n_lat, big.n_lon // small.n_lon
    if fa < 1 or fo < 1:
        raise ValidationError(f"grids do not nest: {big} and {small}")
    return fa, fo


def make_coarsen_plan(src: GridSpec, dst: GridSpec) -> RegridPlan:
    """Conservative plan from a fine grid to a nested coarse grid."""
    fa, fo = _integer_factor(src, dst)
    band = src.cell_area_weight.reshape(dst.n_lat, fa)
    return RegridPlan(
        src=src,
        dst=dst,
        mode="conservative_coarsen",
        factor=(fa, fo),
        lat_matrix=band,
        lon_matrix=np.empty((0, 0)),
    )


def cubic_weights(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution weights for offsets -1, 0, 1, 2 at fractional position t."""
    t = np.asarray(t, dtype=np.float64)
    t2, t3 = t * t, t * t * t
    w0 = a * (t3 - 2 * t2 + t)
    w1 = (a + 2) * t3 - (a + 3) * t2 + 1
    w2 = -(a + 2) * t3 + (2 * a + 3) * t2 - a * t
    w3 = a * (t2 - t3)
    return np.stack([w0, w1, w2, w3], axis=-1)


def _cubic_matrix(n_src: int, factor: int, periodic: bool) -> np.ndarray:
    n_dst = n_src * factor
    m = np.arange(n_dst)
    base = m // factor
    # source index coordinate of each destination center; phase depends on m % factor
    # only, which makes the stencil exactly shift-equivariant
    phase = ((m % factor) + 0.5) / factor - 0.5
    shift = np.floor(phase).astype(int)
    t = phase - shift
    i0 = base + shift
    w = cubic_weights(t)
    mat = np.zeros((n_dst, n_src), dtype=np.float64)
    for k, off in enumerate((-1, 0, 1, 2)):
        idx = i0 + off
        if periodic:
            idx = idx % n_src
        else:
            idx = np.clip(idx, 0, n_src - 1)
        np.add.at(mat, (m, idx), w[:, k])
    return mat


def make_upsample_plan(src: GridSpec, dst: GridSpec) -> RegridPlan:
    """Bicubic plan from a coarse grid to a nested fine grid."""
    fa, fo = _integer_factor(dst, src)
    return RegridPlan(
        src=src,
        dst=dst,
        mode="bicubic_up",
        factor=(fa, fo),
        lat_matrix=_cubic_matrix(src.n_lat, fa, periodic=False),
        lon_matrix=_cubic_matrix(src.n_lon, fo, periodic=True),
    )


def _check(f: Field, plan: RegridPlan, mode: RegridMode) -> None:
    if plan.mode != mode:
        raise ValidationError(f"plan mode is {plan.mode}, expected {mode}")
    if f.grid != plan.src:
        raise ValidationError(f"field grid {f.grid} does not match plan source {plan.src}")


def coarsen_array(arr: np.ndarray, plan: RegridPlan) -> np.ndarray:
    """Conservative coarsening of any [..., lat, lon] array (float64 result)."""
    fa, fo = plan.factor
    nj, nk = plan.dst.shape
    x = np.asarray(arr, dtype=np.float64)
    lead = x.shape[:-2]
    x = x.reshape(lead + (nj, fa, nk, fo))
    band = plan.lat_matrix
    num = np.einsum("...jakb,ja->...jk", x, band) / fo
    return num / band.sum(axis=1)[:, None]


def upsample_array(arr: np.ndarray, plan: RegridPlan) -> np.ndarray:
    """Bicubic upsampling of any [..., lat, lon] array (float64 result)."""
    x = np.asarray(arr, dtype=np.float64)
    return np.einsum("ij,...jk,lk->...il", plan.lat_matrix, x, plan.lon_matrix)


def coarsen(f: Field, plan: RegridPlan) -> Field:
    """
    Area-weighted mean of each coarse cell's fine children; the global weighted mean is
    preserved.
    """
    _check(f, plan, "conservative_coarsen")
    out = coarsen_array(f.data, plan).astype(f.data.dtype)
    return f.with_data(out, grid=plan.dst)


def interpolate_up(f: Field, plan: RegridPlan) -> Field:
    """
    Catmull-Rom bicubic interpolation at destination cell centers; longitude wraps,
    latitude clamps at the first and last rows.
    """
    _check(f, plan, "bicubic_up")
    out = upsample_array(f.data, plan).astype(f.data.dtype)
    return f.with_data(out, grid=plan.dst)


def recoarsen_for_validation(hr: Field, plan: RegridPlan) -> Field:
    """Re-coarsen a high-resolution field with the training-time conservative plan."""
    return coarsen(hr, plan)
