"""Minimal NIfTI-1 volume I/O.

Covers exactly what the preprocessing pipeline needs: reading single-file
``.nii`` / ``.nii.gz`` volumes as 3D arrays (applying the header's
slope/intercept scaling), and writing float32 volumes for tests and demos.
Extension records, orientation matrices, and NIfTI-2 are out of scope.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER_SIZE = 348

# NIfTI-1 datatype codes -> numpy dtypes (unsupported codes are rejected).
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}


def _open_maybe_gzip(path: Path):
    if path.name.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_volume(path) -> np.ndarray:
    """Read a 3D NIfTI-1 volume as float64, scaled by scl_slope/scl_inter.

    4D volumes with a trailing singleton dimension are squeezed; anything
    else with more than 3 non-trivial dimensions is rejected.
    """
    path = Path(path)
    try:
        with _open_maybe_gzip(path) as f:
            header = f.read(HEADER_SIZE)
            if len(header) < HEADER_SIZE:
                raise DataError(f"truncated NIfTI header in {path}")
            byte_order = "<"
            (sizeof_hdr,) = struct.unpack("<i", header[:4])
            if sizeof_hdr != HEADER_SIZE:
                byte_order = ">"
                (sizeof_hdr,) = struct.unpack(">i", header[:4])
                if sizeof_hdr != HEADER_SIZE:
                    raise DataError(f"not a NIfTI-1 file: {path}")
            dim = struct.unpack(byte_order + "8h", header[40:56])
            datatype, _bitpix = struct.unpack(byte_order + "2h", header[70:74])
            vox_offset, scl_slope, scl_inter = struct.unpack(
                byte_order + "3f", header[108:120]
            )
            magic = header[344:348]
            if magic not in (b"n+1\x00", b"ni1\x00"):
                raise DataError(f"missing NIfTI magic in {path}")
            ndim = dim[0]
            if ndim < 3:
                raise DataError(f"{path} has {ndim} dimensions, expected a 3D volume")
            shape = tuple(int(d) for d in dim[1 : 1 + ndim])
            if any(d > 1 for d in shape[3:]):
                raise DataError(f"{path} is {ndim}D with shape {shape}; expected 3D")
            shape = shape[:3]
            if datatype not in _DTYPES:
                raise DataError(f"unsupported NIfTI datatype code {datatype} in {path}")
            dtype = np.dtype(_DTYPES[datatype]).newbyteorder(byte_order)
            count = int(np.prod(shape))
            f.seek(int(vox_offset))
            raw = f.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise DataError(f"truncated NIfTI data in {path}")
            data = np.frombuffer(raw, dtype=dtype, count=count)
            # NIfTI stores data Fortran-ordered (x fastest).
            volume = data.reshape(shape, order="F").astype(np.float64)
    except OSError as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        volume = volume * slope + scl_inter
    return volume


def write_volume(path, volume: np.ndarray) -> None:
    """Write a 3D array as a single-file float32 NIfTI-1 volume."""
    path = Path(path)
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {volume.shape}")
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = (3,) + volume.shape + (1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<2h", header, 70, 16, 32)  # float32, 32 bits per voxel
    pixdim = (1.0,) * 8
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<3f", header, 108, 352.0, 1.0, 0.0)  # vox_offset, slope, inter
    header[344:348] = b"n+1\x00"
    payload = np.asfortranarray(volume.astype(np.float32)).tobytes(order="F")
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * 4)  # empty extension flag
        f.write(payload)
