"""SKT1 tensor container.

Layout (all integers little-endian)::

    b"SKT1"  u32 count
    repeat count times:
        u16 name_len  name (UTF-8)  u8 dtype  u8 ndim  ndim x u32 dims  payload

dtype codes: 0 = f64, 1 = f32, 2 = f16 (raw IEEE binary16 bits), 3 = i8.
Payloads are row-major. Tensors keep insertion order, so reading a file and
writing it back reproduces it byte for byte.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError
from .quantstab import QuantizedMatrix

__all__ = [
    "MAGIC",
    "DTYPE_CODES",
    "pack_container",
    "unpack_container",
    "write_container",
    "read_container",
    "quantized_tensors",
    "quantized_from_tensors",
]

MAGIC = b"SKT1"
MAX_NAME_BYTES = 255
MAX_DIMS = 4

DTYPE_CODES: dict[np.dtype, int] = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<f2"): 2,
    np.dtype("i1"): 3,
}
_CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


def _encode_one(name: str, arr: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    if not raw_name or len(raw_name) > MAX_NAME_BYTES:
        raise ContainerFormatError(f"tensor name {name!r}: must be 1..{MAX_NAME_BYTES} UTF-8 bytes")
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = DTYPE_CODES.get(np.dtype(dt))
    if code is None:
        raise ContainerFormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    if arr.ndim > MAX_DIMS:
        raise ContainerFormatError(f"tensor {name!r}: {arr.ndim} dims exceeds {MAX_DIMS}")
    payload = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + payload


def pack_container(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        parts.append(_encode_one(name, np.asarray(arr)))
    return b"".join(parts)


def unpack_container(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise ContainerFormatError(f"magic: expected {MAGIC!r}, got {bytes(view[:4])!r}")
    pos = 4

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerFormatError(
                f"{what}: truncated (need {n} bytes at offset {pos}, file has {len(view)})"
            )
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        if name_len == 0 or name_len > MAX_NAME_BYTES:
            raise ContainerFormatError(f"tensor {i} name length: {name_len} not in 1..{MAX_NAME_BYTES}")
        try:
            name = bytes(take(name_len, f"tensor {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError(f"tensor {i} name: invalid UTF-8") from exc
        if name in out:
            raise ContainerFormatError(f"tensor name {name!r}: duplicate")
        code, ndim = struct.unpack("<BB", take(2, f"tensor {name!r} dtype/ndim"))
        if code not in _CODE_DTYPES:
            raise ContainerFormatError(f"tensor {name!r} dtype: unknown code {code}")
        if ndim > MAX_DIMS:
            raise ContainerFormatError(f"tensor {name!r} ndim: {ndim} exceeds {MAX_DIMS}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"tensor {name!r} dims"))
        dt = _CODE_DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64))
        payload = take(nbytes, f"tensor {name!r} payload")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise ContainerFormatError(f"trailing bytes: {len(view) - pos} after last tensor")
    return out


def write_container(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_container(tensors))


def read_container(path) -> dict[str, np.ndarray]:
    return unpack_container(Path(path).read_bytes())


def quantized_tensors(name: str, qm: QuantizedMatrix) -> dict[str, np.ndarray]:
    """int8 payload under ``name`` plus its per-row scales under ``name.scale``."""
    return {name: qm.q.astype(np.int8), f"{name}.scale": qm.scale.astype(np.float64)}


def quantized_from_tensors(tensors: Mapping[str, np.ndarray], name: str) -> QuantizedMatrix:
    try:
        q = tensors[name]
        scale = tensors[f"{name}.scale"]
    except KeyError as exc:
        raise ContainerFormatError(f"quantized tensor {name!r}: missing {exc.args[0]!r}") from exc
    if q.dtype != np.int8 or q.ndim != 2 or scale.shape != (q.shape[0],):
        raise ContainerFormatError(f"quantized tensor {name!r}: inconsistent payload/scale")
    return QuantizedMatrix(q, scale)
