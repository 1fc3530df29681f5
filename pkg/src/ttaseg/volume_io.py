"""``TVOL`` volume files.

Header: ``b"TVOL"``, u32 version (1), u8 dtype tag (0 = f32 intensity,
1 = u8 labels), u32 dims[3], f32 voxel size in mm; then the little-endian
row-major payload with width fastest.
"""

import struct

import numpy as np

from .exceptions import DimensionError, FileFormatError, TruncatedFileError, VersionError

MAGIC = b"TVOL"
VERSION = 1
_HEADER = struct.Struct("<4sIB3If")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def dumps_volume(volume, voxel_size=0.6):
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DimensionError(f"expected a 3-D volume, got shape {volume.shape}")
    if volume.dtype == np.uint8:
        tag = 1
    elif np.issubdtype(volume.dtype, np.floating):
        tag = 0
    else:
        raise TypeError(f"unsupported volume dtype {volume.dtype}; use float32 or uint8")
    header = _HEADER.pack(MAGIC, VERSION, tag, *volume.shape, voxel_size)
    return header + np.ascontiguousarray(volume, dtype=_DTYPES[tag]).tobytes()


def loads_volume(data):
    """Returns ``(volume, voxel_size)``."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise FileFormatError("not a TVOL file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("TVOL header is truncated")
    _, version, tag, d, h, w, voxel = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"TVOL version {version} is not supported (expected {VERSION})")
    if tag not in _DTYPES:
        raise FileFormatError(f"unknown TVOL dtype tag {tag}")
    dtype = _DTYPES[tag]
    expected = d * h * w * dtype.itemsize
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedFileError(f"TVOL payload is {len(payload)} bytes, header promises {expected}")
    vol = np.frombuffer(payload, dtype=dtype).reshape(d, h, w)
    return vol.astype(np.float32 if tag == 0 else np.uint8), float(voxel)


def save_volume(path, volume, voxel_size=0.6):
    with open(path, "wb") as fh:
        fh.write(dumps_volume(volume, voxel_size))


def load_volume(path):
    with open(path, "rb") as fh:
        return loads_volume(fh.read())
