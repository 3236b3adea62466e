"""Reader and writer for the RSTK v1 raster container.

A file is one UTF-8 JSON header line followed by raw little-endian samples
in time -> band -> row -> col order::

    {"magic": "RSTK1", "T": 7, "B": 4, "H": 64, "W": 64, "dtype": "f32le", "nodata": -9999.0}
    <T*B*H*W samples>

Only ``f32le`` and ``u8`` sample types exist.
"""

from __future__ import annotations

import json
import os

import numpy as np

MAGIC = "RSTK1"
DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class FormatError(ValueError):
    """Raised when a container header or payload is malformed."""


def dumps_header(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def write_array(path, values: np.ndarray, dtype: str = "f32le", nodata=None,
                transform=None, band_names=None, timestep_labels=None) -> None:
    """Write a 4-D ``(T, B, H, W)`` array as an RSTK v1 file."""
    if dtype not in DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    values = np.asarray(values)
    if values.ndim != 4:
        raise FormatError(f"expected a (T, B, H, W) array, got shape {values.shape}")
    T, B, H, W = values.shape
    header = {"magic": MAGIC, "T": T, "B": B, "H": H, "W": W, "dtype": dtype,
              "nodata": nodata}
    if transform is not None:
        header["transform"] = [float(v) for v in transform]
    if band_names is not None:
        header["band_names"] = list(band_names)
    if timestep_labels is not None:
        header["timestep_labels"] = list(timestep_labels)
    payload = np.ascontiguousarray(values, dtype=DTYPES[dtype]).tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_header(header))
        fh.write(payload)
    os.replace(tmp, path)


def read_array(path) -> tuple[dict, np.ndarray]:
    """Return ``(header, values)`` with values shaped ``(T, B, H, W)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad header line") from exc
        if not isinstance(header, dict) or header.get("magic") != MAGIC:
            raise FormatError(f"{path}: not an RSTK v1 file")
        dtype = header.get("dtype")
        if dtype not in DTYPES:
            raise FormatError(f"{path}: unsupported dtype {dtype!r}")
        shape = tuple(int(header[k]) for k in ("T", "B", "H", "W"))
        count = int(np.prod(shape))
        data = np.frombuffer(fh.read(), dtype=DTYPES[dtype])
    if data.size != count:
        raise FormatError(f"{path}: expected {count} samples, found {data.size}")
    return header, data.reshape(shape).copy()
