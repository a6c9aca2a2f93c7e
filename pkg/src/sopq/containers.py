"""Neutral tensor container: magic, JSON header, raw little-endian payload.

The header records name, shape, dtype (f32 / f16 / bf16) and row-major
order; the payload is the raw element bytes.  Channel-norm files use the
same container with a 1-D shape.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = ["TENSOR_MAGIC", "ContainerError", "write_tensor", "read_tensor"]

TENSOR_MAGIC = b"SOPT1"

_DTYPES = {"f32": "<f4", "f16": "<f2", "bf16": "<u2"}


class ContainerError(ValueError):
    pass


def _to_bf16_bits(arr: np.ndarray) -> np.ndarray:
    u = arr.astype(np.float32).view(np.uint32)
    return ((u + 0x7FFF + ((u >> 16) & 1)) >> 16).astype("<u2")


def write_tensor(path, array, name: str, dtype: str = "f32") -> None:
    if dtype not in _DTYPES:
        raise ContainerError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(array)
    if dtype == "bf16":
        payload = _to_bf16_bits(arr).tobytes()
    else:
        payload = arr.astype(_DTYPES[dtype]).tobytes()
    header = {
        "name": name,
        "shape": list(arr.shape),
        "dtype": dtype,
        "order": "row-major",
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(np.uint32(len(hdr)).tobytes())
        f.write(hdr)
        f.write(payload)


def read_tensor(path):
    """Returns (header dict, float64 array)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != TENSOR_MAGIC:
        raise ContainerError(f"{path}: bad magic; not a tensor container")
    hlen = int(np.frombuffer(data[5:9], dtype=np.uint32)[0])
    header = json.loads(data[9 : 9 + hlen].decode())
    payload = data[9 + hlen :]
    shape = tuple(header["shape"])
    dtype = header["dtype"]
    count = int(np.prod(shape)) if shape else 1
    if dtype == "bf16":
        bits = np.frombuffer(payload, dtype="<u2", count=count)
        arr = (bits.astype(np.uint32) << 16).view(np.float32).astype(np.float64)
    else:
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype], count=count).astype(np.float64)
    return header, arr.reshape(shape)
