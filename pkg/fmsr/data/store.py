"""
On-disk dataset format. A record is a single file:

    8 bytes   little-endian uint64 header length N
    N bytes   UTF-8 JSON header (sorted keys)
    rest      raw little-endian float32 blob in the header-declared layout

The header carries the schema version, grid, channel catalog and its hash, dims and
dim_names, dtype, endianness, caller metadata and the sha256 of the blob. Headers hold
no wall-clock timestamps, so identical inputs give bit-identical files.
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fmsr.errors import (
    HashMismatchError,
    MissingInputError,
    SchemaVersionError,
    StoreError,
    ValidationError,
)
from .grid import (
    ChannelCatalog,
    EnsembleSet,
    Field,
    GridSpec,
    Trajectory,
    as_fields,
    make_grid,
)
from .synth import Climatology

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUFFIX = ".fmsr"
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class Record:
    header: Dict[str, Any]
    data: np.ndarray

    @property
    def grid(self) -> GridSpec:
        g = self.header["grid"]
        return make_grid(g["n_lat"], g["n_lon"])

    @property
    def channels(self) -> ChannelCatalog:
        return ChannelCatalog.from_dict(self.header["channels"])

    @property
    def metadata(self) -> Dict[str, Any]:
        return self.header.get("metadata", {})


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def write_json(path: str, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str, hint: Optional[str] = None) -> Any:
    if not os.path.exists(path):
        raise MissingInputError(_missing_message(path, hint))
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _missing_message(path: str, hint: Optional[str]) -> str:
    msg = f"missing input {path}"
    return f"{msg}; {hint}" if hint else msg


def encode_record(header: Dict[str, Any], blob: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(head)) + head + blob


def split_record(raw: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], bytes]:
    """Parse the header and verify schema version, layout and content hash of the blob."""
    if len(raw) < _LEN.size:
        raise StoreError(f"{source} is truncated")
    (n,) = _LEN.unpack_from(raw)
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StoreError(f"{source} has an unreadable header: {e}")
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{source} has schema version {version}, this build reads "
            f"{SCHEMA_VERSION}; regenerate it with the current version"
        )
    if header.get("dtype") != "float32" or header.get("endianness") != "little":
        raise StoreError(f"{source} declares an unsupported layout")
    blob = raw[_LEN.size + n :]
    if sha256_bytes(blob) != header.get("content_hash"):
        raise HashMismatchError(
            f"{source} content hash does not match its header; the file is corrupted"
        )
    return header, blob


def decode_record(raw: bytes, source: str = "<bytes>") -> Record:
    header, blob = split_record(raw, source)
    dims = tuple(header["dims"])
    expected = int(np.prod(dims)) * _DTYPE.itemsize
    if len(blob) != expected:
        raise StoreError(f"{source} blob has {len(blob)} bytes, header declares {expected}")
    data = np.frombuffer(blob, dtype=_DTYPE).reshape(dims)
    return Record(header=header, data=data)


class FieldStore(object):
    """
    A directory of records sharing one channel catalog.
    """

    def __init__(self, directory: str):
        self.directory = directory

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name + SUFFIX)

    def exists(self, name: str) -> bool:
        return os.path.exists(self.path(name))

    def names(self) -> List[str]:
        if not os.path.isdir(self.directory):
            return []
        return sorted(
            f[: -len(SUFFIX)] for f in os.listdir(self.directory) if f.endswith(SUFFIX)
        )

    def _check_catalog(self, name: str, catalog_hash: str) -> None:
        for other in self.names():
            if other == name:
                continue
            header = self.read_header(other)
            if header["catalog_hash"] != catalog_hash:
                raise HashMismatchError(
                    f"record {name} uses catalog {catalog_hash} but {other} in "
                    f"{self.directory} uses {header['catalog_hash']}"
                )
            return

    def write(
        self,
        name: str,
        data: np.ndarray,
        grid: GridSpec,
        channels: ChannelCatalog,
        dim_names: Sequence[str],
        metadata: Optional[Dict[str, Any]] = None,
    ) -> str:
        """
        :param data: array whose trailing dims are [channel, lat, lon]
        :param dim_names: one name per dim, e.g. ["time", "channel", "lat", "lon"]
        """
        arr = np.ascontiguousarray(data, dtype=_DTYPE)
        if arr.ndim < 3 or arr.shape[-3:] != (len(channels), grid.n_lat, grid.n_lon):
            raise ValidationError(
                f"record {name} has shape {arr.shape}, expected trailing "
                f"{(len(channels), grid.n_lat, grid.n_lon)}"
            )
        if len(dim_names) != arr.ndim:
            raise ValidationError(f"dim_names {dim_names} do not match ndim {arr.ndim}")
        catalog_hash = channels.digest()
        self._check_catalog(name, catalog_hash)
        blob = arr.tobytes()
        header = {
            "schema_version": SCHEMA_VERSION,
            "name": name,
            "grid": grid.to_dict(),
            "channels": channels.to_dict(),
            "catalog_hash": catalog_hash,
            "dims": list(arr.shape),
            "dim_names": list(dim_names),
            "dtype": "float32",
            "endianness": "little",
            "metadata": metadata or {},
            "content_hash": sha256_bytes(blob),
        }
        os.makedirs(self.directory, exist_ok=True)
        path = self.path(name)
        with open(path, "wb") as f:
            f.write(encode_record(header, blob))
        logger.info("Wrote %s %s to %s", name, tuple(arr.shape), path)
        return path

    def _raw(self, name: str, hint: Optional[str]) -> bytes:
        path = self.path(name)
        if not os.path.exists(path):
            raise MissingInputError(_missing_message(path, hint))
        with open(path, "rb") as f:
            return f.read()

    def read(self, name: str, hint: Optional[str] = None) -> Record:
        return decode_record(self._raw(name, hint), source=self.path(name))

    def read_header(self, name: str) -> Dict[str, Any]:
        path = self.path(name)
        if not os.path.exists(path):
            raise MissingInputError(_missing_message(path, None))
        with open(path, "rb") as f:
            (n,) = _LEN.unpack(f.read(_LEN.size))
            return json.loads(f.read(n).decode("utf-8"))

    # typed helpers

    def write_fields(
        self,
        name: str,
        fields: Sequence[Field],
        metadata: Optional[Dict[str, Any]] = None,
    ) -> str:
        if len(fields) == 0:
            raise ValidationError(f"record {name} has no fields")
        for f in fields[1:]:
            fields[0].check_compatible(f)
        meta = dict(metadata or {})
        meta["timestamps"] = [f.timestamp for f in fields]
        return self.write(
            name,
            np.stack([f.data for f in fields]),
            fields[0].grid,
            fields[0].channels,
            ["time", "channel", "lat", "lon"],
            meta,
        )

    def read_fields(self, name: str, hint: Optional[str] = None) -> List[Field]:
        rec = self.read(name, hint)
        if rec.header["dim_names"] != ["time", "channel", "lat", "lon"]:
            raise StoreError(f"record {name} is not a field sequence")
        return as_fields(
            rec.data, rec.grid, rec.channels, rec.metadata.get("timestamps")
        )

    def write_ensembles(
        self,
        name: str,
        ensembles: Sequence[EnsembleSet],
        metadata: Optional[Dict[str, Any]] = None,
    ) -> str:
        if len(ensembles) == 0:
            raise ValidationError(f"record {name} has no ensembles")
        first = ensembles[0]
        for e in ensembles[1:]:
            if e.M != first.M or e.T != first.T:
                raise ValidationError("ensembles in one record must share M and T")
        meta = dict(metadata or {})
        meta["init_times"] = [e.init_time for e in ensembles]
        meta["lead_step_hours"] = first.members[0].lead_step_hours
        return self.write(
            name,
            np.stack([e.stack() for e in ensembles]),
            first.grid,
            first.channels,
            ["init", "member", "lead", "channel", "lat", "lon"],
            meta,
        )

    def read_ensembles(self, name: str, hint: Optional[str] = None) -> List[EnsembleSet]:
        rec = self.read(name, hint)
        if rec.header["dim_names"] != ["init", "member", "lead", "channel", "lat", "lon"]:
            raise StoreError(f"record {name} is not an ensemble collection")
        grid, channels = rec.grid, rec.channels
        step = rec.metadata.get("lead_step_hours", 24)
        out = []
        for arr, t0 in zip(rec.data, rec.metadata["init_times"]):
            members = []
            for m_arr in arr:
                lead_ts = [t0 + k + 1 for k in range(len(m_arr))]
                states = as_fields(m_arr, grid, channels, lead_ts)
                members.append(
                    Trajectory(init_time=t0, states=tuple(states), lead_step_hours=step)
                )
            out.append(EnsembleSet(members=tuple(members)))
        return out

    def write_climatology(self, name: str, clim: Climatology) -> None:
        """Slot means and quantiles go to two records; sigma_clim rides in the metadata."""
        meta = {
            "sigma_clim": [float(s) for s in clim.sigma_clim],
            "quantile_levels": list(clim.quantile_levels),
        }
        self.write(
            name + "_mean",
            clim.slot_mean,
            clim.grid,
            clim.channels,
            ["slot", "channel", "lat", "lon"],
            meta,
        )
        self.write(
            name + "_quantiles",
            clim.quantiles,
            clim.grid,
            clim.channels,
            ["quantile", "channel", "lat", "lon"],
            meta,
        )

    def read_climatology(self, name: str, hint: Optional[str] = None) -> Climatology:
        mean = self.read(name + "_mean", hint)
        quant = self.read(name + "_quantiles", hint)
        return Climatology(
            grid=mean.grid,
            channels=mean.channels,
            slot_mean=mean.data.astype(np.float64),
            quantile_levels=tuple(mean.metadata["quantile_levels"]),
            quantiles=quant.data.astype(np.float64),
            sigma_clim=np.asarray(mean.metadata["sigma_clim"], dtype=np.float64),
        )
