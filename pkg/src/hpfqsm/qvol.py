"""QVOL binary volume files.

Layout (little-endian)::

    b"QVL1"                 magic
    u32 nx, ny, nz
    f32 dx, dy, dz          voxel size in mm
    u8  dtype               0 = real f32, 1 = complex (re, im) f32 pairs
    7 zero bytes
    data                    z slowest, x fastest
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .volume import ComplexVolume, RealVolume, VoxelGrid

MAGIC = b"QVL1"
_HEADER = struct.Struct("<4s3I3fB7x")
DTYPE_REAL = 0
DTYPE_COMPLEX = 1


class QvolError(ValueError):
    pass


def encode_qvol(vol: RealVolume | ComplexVolume) -> bytes:
    g = vol.grid
    if isinstance(vol, ComplexVolume):
        code = DTYPE_COMPLEX
        payload = vol.data.astype("<c8")
    else:
        code = DTYPE_REAL
        payload = vol.data.astype("<f4")
    header = _HEADER.pack(MAGIC, g.nx, g.ny, g.nz, g.dx, g.dy, g.dz, code)
    return header + payload.tobytes(order="C")


def decode_qvol(buf: bytes) -> RealVolume | ComplexVolume:
    if len(buf) < _HEADER.size:
        raise QvolError("truncated QVOL header")
    magic, nx, ny, nz, dx, dy, dz, code = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise QvolError(f"bad magic {magic!r}")
    if code not in (DTYPE_REAL, DTYPE_COMPLEX):
        raise QvolError(f"unknown dtype code {code}")
    grid = VoxelGrid(nx, ny, nz, dx, dy, dz)
    dtype = np.dtype("<c8") if code == DTYPE_COMPLEX else np.dtype("<f4")
    expected = grid.size * dtype.itemsize
    body = memoryview(buf)[_HEADER.size:]
    if len(body) != expected:
        raise QvolError(f"payload is {len(body)} bytes, header implies {expected}")
    data = np.frombuffer(body, dtype=dtype).reshape(grid.shape)
    if code == DTYPE_COMPLEX:
        return ComplexVolume(grid, data)
    return RealVolume(grid, data)


def write_qvol(path: str | os.PathLike, vol: RealVolume | ComplexVolume) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_qvol(vol))


def read_qvol(path: str | os.PathLike) -> RealVolume | ComplexVolume:
    with open(path, "rb") as fh:
        return decode_qvol(fh.read())
