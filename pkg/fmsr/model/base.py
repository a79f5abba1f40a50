from typing import Dict, Optional, Tuple
import logging
import os

import numpy as np

from fmsr import CONFIG
from fmsr.data.grid import ChannelCatalog
from fmsr.data.residual import NormStats
from fmsr.data.store import SCHEMA_VERSION, encode_record, sha256_bytes, split_record
from fmsr.errors import HashMismatchError, MissingInputError, ValidationError
from .diffnet import ArchSpec, VelocityNet
from .utils import get_full_path

logger = logging.getLogger(__name__)

# where to find models
try:
    FMSR_MODEL_PATH = CONFIG["fmsr"]["model_path"]
except KeyError:
    FMSR_MODEL_PATH = "./models"

_LE_F32 = np.dtype("<f4")


def checkpoint_path(name: str = "velocity_net", model_path: Optional[str] = None) -> str:
    return get_full_path(model_path or FMSR_MODEL_PATH, name + ".ckpt")


def save_checkpoint(
    path: str, net: VelocityNet, catalog: ChannelCatalog, stats: NormStats
) -> str:
    """
    Write the JSON header (architecture, catalog and norm-stats hashes, parameter
    layout) and the little-endian float32 parameter blob.
    """
    if len(catalog) != net.n_channels or tuple(catalog.labels) != stats.labels:
        raise ValidationError(
            f"net, catalog {catalog.labels} and stats {list(stats.labels)} disagree"
        )
    params = net.params_numpy()
    names = sorted(params)
    blob = b"".join(np.ascontiguousarray(params[n], dtype=_LE_F32).tobytes() for n in names)
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "velocity_net",
        "arch": net.arch.dict(),
        "n_channels": net.n_channels,
        "catalog_hash": catalog.digest(),
        "norm_stats_hash": stats.digest(),
        "params": [[n, list(params[n].shape)] for n in names],
        "dtype": "float32",
        "endianness": "little",
        "content_hash": sha256_bytes(blob),
    }
    path = get_full_path(path)
    with open(path, "wb") as f:
        f.write(encode_record(header, blob))
    logger.info("Saved checkpoint (%d parameters) to %s", net.n_parameters(), path)
    return path


def load_checkpoint(
    path: str,
    catalog: Optional[ChannelCatalog] = None,
    stats: Optional[NormStats] = None,
) -> Tuple[VelocityNet, Dict]:
    """
    :param catalog: if given, must match the catalog the net was trained on
    :param stats: if given, must match the normalization statistics used in training
    :return: net (float32) and the checkpoint header
    """
    if not os.path.exists(path):
        raise MissingInputError(f"missing checkpoint {path}; run `fmsr train` first")
    with open(path, "rb") as f:
        header, blob = split_record(f.read(), source=path)
    if catalog is not None and catalog.digest() != header["catalog_hash"]:
        raise HashMismatchError(
            f"checkpoint {path} was trained on catalog {header['catalog_hash']}, "
            f"got {catalog.digest()}"
        )
    if stats is not None and stats.digest() != header["norm_stats_hash"]:
        raise HashMismatchError(
            f"checkpoint {path} was trained with norm stats {header['norm_stats_hash']}, "
            f"got {stats.digest()}; rerun `fmsr fit-stats` and `fmsr train` together"
        )
    params = {}
    offset = 0
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * _LE_F32.itemsize
        params[name] = np.frombuffer(blob[offset : offset + n], dtype=_LE_F32).reshape(
            shape
        )
        offset += n
    if offset != len(blob):
        raise ValidationError(f"checkpoint {path} blob length does not match its layout")
    net = VelocityNet(ArchSpec(**header["arch"]), header["n_channels"])
    net.load_params_numpy(params)
    return net, header
