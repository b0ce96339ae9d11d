"""Binary raster files: magic ``RVRD``, u32 C, H, W, then C*H*W little-endian float32."""

import struct

import numpy as np

MAGIC = b"RVRD"
_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


def write_raster(path, array):
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise RasterFormatError(f"raster must be C x H x W, got shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *data.shape))
        fh.write(data.tobytes())


def read_raster(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise RasterFormatError(f"{path}: file too short for raster header")
    magic, c, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * c * h * w
    if len(blob) != expected:
        raise RasterFormatError(f"{path}: expected {expected} bytes for {c}x{h}x{w}, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    return data.astype(np.float32)
