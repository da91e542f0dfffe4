"""Volume and mask file IO.

Two on-disk formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``) via a self-contained codec for the
  fixed 348-byte header.  Arrays are held in ``(axis0, axis1, axis2)``
  C order in memory and stored in the standard fastest-first voxel
  order on disk, so files interoperate with the usual neuroimaging
  tools.
* a raw fallback (``.raw`` + ``.hdr`` sidecar): little-endian array
  bytes next to a small structured-text header with shape, spacing,
  origin and dtype.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np
import yaml

from .volumes import BinaryMask, LabelVolume, Volume3D

__all__ = [
    "read_nifti",
    "write_nifti",
    "read_raw",
    "write_raw",
    "load_volume",
    "save_volume",
    "load_mask",
    "save_mask",
    "load_label",
    "save_label",
]

_NIFTI_HDR_SIZE = 348
_NIFTI_MAGIC = b"n+1\x00"

# NIfTI-1 datatype code -> numpy dtype
_DTYPE_CODES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _open_maybe_gzip(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_nifti(path, data: np.ndarray, spacing, origin) -> None:
    """Write a 3D array with grid metadata as a NIfTI-1 file."""
    path = Path(path)
    data = np.ascontiguousarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    if data.dtype == bool:
        data = data.astype(np.uint8)
    if np.dtype(data.dtype) not in _CODE_FOR_DTYPE:
        data = data.astype(np.float32)
    code = _CODE_FOR_DTYPE[np.dtype(data.dtype)]
    bitpix = data.dtype.itemsize * 8

    # On-disk voxel order is fastest-first (x, y, z); our arrays are
    # (axis0, axis1, axis2) C order, so disk dims are the reverse.
    nx, ny, nz = data.shape[::-1]
    sx, sy, sz = [float(s) for s in spacing][::-1]
    ox, oy, oz = [float(o) for o in origin][::-1]

    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 0.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)    # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)    # scl_inter
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = _NIFTI_MAGIC

    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)  # no extensions
        fh.write(data.tobytes())


def read_nifti(path) -> tuple[np.ndarray, tuple, tuple]:
    """Read a NIfTI-1 file, returning ``(data, spacing, origin)``."""
    path = Path(path)
    with _open_maybe_gzip(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _NIFTI_HDR_SIZE:
        raise ValueError(f"{path}: truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    byte_order = "<"
    if sizeof_hdr != _NIFTI_HDR_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != _NIFTI_HDR_SIZE:
            raise ValueError(f"{path}: not a NIfTI-1 file")
        byte_order = ">"
    if blob[344:347] != _NIFTI_MAGIC[:3]:
        raise ValueError(f"{path}: unsupported NIfTI magic {blob[344:348]!r}")

    dim = struct.unpack_from(f"{byte_order}8h", blob, 40)
    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4:4 + max(0, ndim - 3)]):
        raise ValueError(f"{path}: only 3D volumes are supported, dim={dim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    (code,) = struct.unpack_from(f"{byte_order}h", blob, 70)
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder(byte_order)
    pixdim = struct.unpack_from(f"{byte_order}8f", blob, 76)
    (vox_offset,) = struct.unpack_from(f"{byte_order}f", blob, 108)
    slope, inter = struct.unpack_from(f"{byte_order}2f", blob, 112)
    (sform_code,) = struct.unpack_from(f"{byte_order}h", blob, 254)

    count = nx * ny * nz
    start = int(vox_offset)
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
    data = data.reshape((nz, ny, nx)).astype(dtype.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * slope + inter

    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    if sform_code > 0:
        srow_x = struct.unpack_from(f"{byte_order}4f", blob, 280)
        srow_y = struct.unpack_from(f"{byte_order}4f", blob, 296)
        srow_z = struct.unpack_from(f"{byte_order}4f", blob, 312)
        origin = (float(srow_z[3]), float(srow_y[3]), float(srow_x[3]))
    else:
        qoff = struct.unpack_from(f"{byte_order}3f", blob, 268)
        origin = (float(qoff[2]), float(qoff[1]), float(qoff[0]))
    return data, spacing, origin


def write_raw(path, data: np.ndarray, spacing, origin) -> None:
    """Write array bytes (little-endian) plus a ``.hdr`` text sidecar."""
    path = Path(path)
    if path.suffix != ".raw":
        raise ValueError(f"raw format expects a .raw path, got {path}")
    data = np.ascontiguousarray(data)
    if data.dtype == bool:
        data = data.astype(np.uint8)
    data = data.astype(data.dtype.newbyteorder("<"))
    header = {
        "format": "echodetect-raw-v1",
        "shape": [int(n) for n in data.shape],
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "dtype": data.dtype.name,
        "byte_order": "little",
    }
    path.write_bytes(data.tobytes())
    path.with_suffix(".hdr").write_text(yaml.safe_dump(header, sort_keys=False))


def read_raw(path) -> tuple[np.ndarray, tuple, tuple]:
    path = Path(path)
    header = yaml.safe_load(path.with_suffix(".hdr").read_text())
    if header.get("format") != "echodetect-raw-v1":
        raise ValueError(f"{path}: unrecognized raw header format {header.get('format')!r}")
    if header.get("byte_order", "little") != "little":
        raise ValueError(f"{path}: only little-endian raw volumes are supported")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    shape = tuple(int(n) for n in header["shape"])
    data = np.frombuffer(path.read_bytes(), dtype=dtype).reshape(shape)
    data = data.astype(dtype.newbyteorder("="))
    return data, tuple(header["spacing"]), tuple(header["origin"])


def _write_any(path, data, spacing, origin) -> None:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        write_nifti(path, data, spacing, origin)
    elif path.suffix == ".raw":
        write_raw(path, data, spacing, origin)
    else:
        raise ValueError(f"unsupported volume extension: {path.name}")


def _read_any(path) -> tuple[np.ndarray, tuple, tuple]:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return read_nifti(path)
    if path.suffix == ".raw":
        return read_raw(path)
    raise ValueError(f"unsupported volume extension: {path.name}")


def save_volume(path, vol: Volume3D) -> None:
    _write_any(path, vol.data.astype(np.float32), vol.spacing, vol.origin)


def load_volume(path) -> Volume3D:
    data, spacing, origin = _read_any(path)
    return Volume3D(data.astype(np.float32), spacing, origin)


def save_mask(path, mask: BinaryMask) -> None:
    _write_any(path, mask.data.astype(np.uint8), mask.spacing, mask.origin)


def load_mask(path) -> BinaryMask:
    data, spacing, origin = _read_any(path)
    return BinaryMask(data != 0, spacing, origin)


def save_label(path, label: LabelVolume) -> None:
    _write_any(path, label.data.astype(np.uint8), label.spacing, label.origin)


def load_label(path, provenance: str) -> LabelVolume:
    data, spacing, origin = _read_any(path)
    return LabelVolume((data != 0).astype(np.uint8), provenance, spacing, origin)
