"""Binary tensor container used for checkpoints and dataset blobs.

A ``.ptns`` file is a sequence of records, each laid out as:
magic ``PTNS``, version u16, dtype code u8, ndim u8, dims as u32
little-endian, then the raw little-endian values.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTNS"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(IOError):
    """Corrupt, truncated, or version-mismatched container data."""


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return _DTYPE_CODES[dt]


def write_record(fh, arr: np.ndarray) -> int:
    """Append one tensor record; returns its byte offset in the file."""
    offset = fh.tell()
    code = _dtype_code(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<HBB", VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return offset


def read_record(fh) -> np.ndarray:
    header = fh.read(8)
    if len(header) < 8:
        raise ContainerError("truncated record header")
    if header[:4] != MAGIC:
        raise ContainerError(f"bad magic {header[:4]!r}")
    version, code, ndim = struct.unpack("<HBB", header[4:])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in _CODE_DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    dims_raw = fh.read(4 * ndim)
    if len(dims_raw) < 4 * ndim:
        raise ContainerError("truncated dims")
    dims = struct.unpack(f"<{ndim}I", dims_raw)
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) < nbytes:
        raise ContainerError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_tensors(path: str | Path, arrays: list[np.ndarray]) -> list[int]:
    """Write records in order; returns per-record offsets."""
    offsets = []
    with open(path, "wb") as fh:
        for arr in arrays:
            offsets.append(write_record(fh, arr))
    return offsets


def read_tensors(path: str | Path, count: int | None = None) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        fh.seek(0, 2)
        end = fh.tell()
        fh.seek(0)
        while fh.tell() < end:
            out.append(read_record(fh))
    if count is not None and len(out) != count:
        raise ContainerError(f"expected {count} records, found {len(out)}")
    return out


def save_checkpoint(prefix: str | Path, named: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Named tensors as <prefix>.ptns plus a <prefix>.json manifest."""
    prefix = Path(prefix)
    manifest: dict = {"version": VERSION, "tensors": {}}
    if meta:
        manifest["meta"] = meta
    with open(prefix.with_suffix(".ptns"), "wb") as fh:
        for name, arr in named.items():
            offset = write_record(fh, arr)
            manifest["tensors"][name] = {
                "offset": offset,
                "shape": list(arr.shape),
                "dtype": _dtype_code(arr),
            }
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != VERSION:
        raise ContainerError(f"unsupported manifest version {manifest.get('version')}")
    named = {}
    with open(prefix.with_suffix(".ptns"), "rb") as fh:
        for name, entry in manifest["tensors"].items():
            fh.seek(entry["offset"])
            arr = read_record(fh)
            if list(arr.shape) != entry["shape"]:
                raise ContainerError(f"shape mismatch for {name}")
            named[name] = arr
    return named, manifest.get("meta", {})
