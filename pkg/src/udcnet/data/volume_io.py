"""Binary volume container.

Byte layout (little-endian throughout)::

    offset  size  field
    0       4     magic b"UDCV"
    4       2     format version (u16, currently 1)
    6       2     dtype code (u16): 1=u8, 2=i16, 3=f32, 4=f64
    8       12    dims, 3 x u32 (row-major, last axis fastest)
    20      12    spacing in mm, 3 x f32
    32      ...   payload, prod(dims) * itemsize bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"UDCV"
VERSION = 1
HEADER = struct.Struct("<4sHH3I3f")
DTYPE_CODES = {1: np.uint8, 2: np.int16, 3: np.float32, 4: np.float64}
CODE_OF = {np.dtype(v): k for k, v in DTYPE_CODES.items()}
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def write_volume(path, volume, spacing=None) -> None:
    if isinstance(volume, Volume):
        data, spacing = volume.data, spacing or volume.spacing
    else:
        data = np.asarray(volume)
    spacing = tuple(float(s) for s in (spacing or (1.0, 1.0, 1.0)))
    if data.ndim != 3:
        raise VolumeFormatError(f"volumes must be 3-D, got shape {data.shape}")
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    code = CODE_OF.get(data.dtype)
    if code is None:
        raise VolumeFormatError(f"unsupported dtype {data.dtype}")
    header = HEADER.pack(MAGIC, VERSION, code, *data.shape, *spacing)
    payload = np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_volume(path) -> Volume:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < 4 or head[:4] != MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {head[:4]!r}, expected {MAGIC!r}")
        if len(head) < HEADER.size:
            raise VolumeFormatError(f"{path}: truncated header ({len(head)} of {HEADER.size} bytes)")
        _, version, code, d, h, w, sx, sy, sz = HEADER.unpack(head)
        if version != VERSION:
            raise VolumeFormatError(f"{path}: unsupported format version {version}")
        if code not in DTYPE_CODES:
            raise VolumeFormatError(f"{path}: unknown dtype code {code}")
        voxels = d * h * w
        if voxels == 0 or voxels > MAX_VOXELS:
            raise VolumeFormatError(f"{path}: dims {(d, h, w)} out of range")
        dtype = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
        expected = voxels * dtype.itemsize
        payload = fh.read(expected + 1)
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
            + (" (trailing data)" if len(payload) > expected else " (truncated)"))
    data = np.frombuffer(payload, dtype=dtype).reshape(d, h, w).astype(DTYPE_CODES[code])
    return Volume(data=data, spacing=(sx, sy, sz))
