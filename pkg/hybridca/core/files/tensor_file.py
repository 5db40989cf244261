""" Binary tensor container (``.hcat``).

Layout, all integers little-endian::

    offset 0   b"HCAT"                 magic
    offset 4   0x01                    version
    offset 5   0x01                    dtype, 64-bit real
    offset 6   ndim                    one unsigned byte
    offset 7   ndim x uint64           extents
    then       prod(extents) x float64 row-major payload
"""
from pathlib import Path
import struct
from typing import Union

import numpy as np
from loguru import logger as log

from hybridca.core.autodiff import Tensor
from hybridca.core.errors import FormatError

MAGIC = b"HCAT"
VERSION = 0x01
DTYPE_FLOAT64 = 0x01
HEADER = struct.Struct("<4sBBB")


def encode_tensor(t: Union[Tensor, np.ndarray]) -> bytes:
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if data.ndim > 255:
        raise ValueError(f"Cannot encode a tensor with {data.ndim} axes")
    return (
        HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT64, data.ndim)
        + np.asarray(data.shape, dtype="<u8").tobytes()
        + np.ascontiguousarray(data, dtype="<f8").tobytes()
    )


def decode_tensor(raw: bytes) -> Tensor:
    if len(raw) < HEADER.size:
        raise FormatError(
            f"Header needs {HEADER.size} bytes, file has {len(raw)}", offset=len(raw)
        )
    magic, version, dtype, ndim = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"Unsupported version {version:#04x}", offset=4)
    if dtype != DTYPE_FLOAT64:
        raise FormatError(f"Unsupported dtype code {dtype:#04x}", offset=5)

    extents_end = HEADER.size + 8 * ndim
    if len(raw) < extents_end:
        raise FormatError(
            f"Extents need {extents_end} bytes, file has {len(raw)}", offset=len(raw)
        )
    shape = tuple(int(e) for e in np.frombuffer(raw, dtype="<u8", count=ndim, offset=HEADER.size))
    count = int(np.prod(shape, dtype=np.uint64))
    expected = extents_end + 8 * count
    if len(raw) != expected:
        raise FormatError(
            f"Payload for shape {shape} needs {expected} bytes in total, file has {len(raw)}",
            offset=min(len(raw), expected),
        )
    payload = np.frombuffer(raw, dtype="<f8", count=count, offset=extents_end)
    return Tensor(payload.reshape(shape))


def save_tensor(t: Union[Tensor, np.ndarray], path: Path) -> Path:
    path = Path(path)
    path.write_bytes(encode_tensor(t))
    log.trace(f"Wrote tensor {getattr(t, 'shape', None)} to {path}")
    return path


def load_tensor(path: Path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())
