"""Minimal NIfTI-1 reader/writer for axis-aligned volumes and label masks.

Scope is deliberately narrow: single-file .nii / .nii.gz, scalar float32
images and int16 masks, axis-aligned affines. Masks carry their label
vocabulary in a JSON sidecar (<stem>.labels.json). Round trips are
bit-exact for the declared dtypes.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .volume import LabelMask, Volume3D

HDR_SIZE = 348
MAGIC = b"n+1\x00"

_DTYPES = {
    4: np.dtype("<i2"),    # NIFTI_TYPE_INT16
    8: np.dtype("<i4"),    # NIFTI_TYPE_INT32
    16: np.dtype("<f4"),   # NIFTI_TYPE_FLOAT32
    64: np.dtype("<f8"),   # NIFTI_TYPE_FLOAT64
    2: np.dtype("u1"),     # NIFTI_TYPE_UINT8
}


class NiftiFormatError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _pack_header(dims, spacing, origin, datatype: int, bitpix: int) -> bytes:
    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)                       # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)         # dim
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)                        # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                          # scl_slope
    struct.pack_into("<h", hdr, 252, 1)                            # qform_code
    struct.pack_into("<h", hdr, 254, 1)                            # sform_code
    # identity quaternion; qoffset = origin
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, *origin)
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, origin[0])  # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, origin[1])  # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], origin[2])  # srow_z
    hdr[344:348] = MAGIC
    return bytes(hdr)


def _parse_header(raw: bytes, path: Path):
    if len(raw) < HDR_SIZE:
        raise NiftiFormatError(
            f"{path}: truncated header, need bytes 0..{HDR_SIZE - 1}, have {len(raw)}")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HDR_SIZE:
        raise NiftiFormatError(f"{path}: sizeof_hdr={sizeof_hdr}, expected {HDR_SIZE}")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4:1 + ndim]):
        raise NiftiFormatError(f"{path}: only 3D volumes supported, dim={dim}")
    dims = dim[1:4]
    if any(d < 1 for d in dims):
        raise NiftiFormatError(f"{path}: non-positive dims {dims}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = pixdim[1:4]
    if any(s <= 0 for s in spacing):
        raise NiftiFormatError(f"{path}: non-positive pixdim {spacing}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    vox_offset = int(vox_offset) if vox_offset else HDR_SIZE + 4
    (scl_slope,) = struct.unpack_from("<f", raw, 112)
    (scl_inter,) = struct.unpack_from("<f", raw, 116)
    (sform_code,) = struct.unpack_from("<h", raw, 254)
    origin = (0.0, 0.0, 0.0)
    if sform_code > 0:
        srow = np.array([struct.unpack_from("<4f", raw, 280 + 16 * r)
                         for r in range(3)])
        rot = srow[:, :3]
        off_diag = rot - np.diag(np.diag(rot))
        if np.any(np.abs(off_diag) > 1e-5 * max(1.0, np.abs(rot).max())):
            raise NiftiFormatError(f"{path}: non-axis-aligned sform affine unsupported")
        origin = tuple(float(v) for v in srow[:, 3])
        spacing = tuple(abs(float(rot[a, a])) or spacing[a] for a in range(3))
    return dims, tuple(float(s) for s in spacing), origin, datatype, vox_offset, \
        (scl_slope if scl_slope not in (0.0,) else 1.0), scl_inter


def _read_array(path: Path):
    path = Path(path)
    raw = _read_bytes(path)
    dims, spacing, origin, datatype, vox_offset, slope, inter = _parse_header(raw, path)
    dtype = _DTYPES[datatype]
    count = int(np.prod(dims))
    need = vox_offset + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiFormatError(
            f"{path}: truncated data, need bytes {vox_offset}..{need - 1}, have {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # NIfTI stores i fastest: Fortran order
    arr = arr.reshape(dims, order="F")
    if (slope, inter) != (1.0, 0.0):
        arr = arr * slope + inter
    return arr, spacing, origin


def _write_array(path: Path, data: np.ndarray, spacing, origin, datatype: int):
    path = Path(path)
    dtype = _DTYPES[datatype]
    hdr = _pack_header(data.shape, spacing, origin, datatype, dtype.itemsize * 8)
    body = hdr + b"\x00\x00\x00\x00" + np.asfortranarray(data.astype(dtype)).tobytes(order="F")
    if path.name.endswith(".gz"):
        path.write_bytes(gzip.compress(body, mtime=0))
    else:
        path.write_bytes(body)


def write_volume(path, vol: Volume3D) -> None:
    _write_array(Path(path), vol.data, vol.spacing, vol.origin, 16)


def read_volume(path) -> Volume3D:
    arr, spacing, origin, = _read_array(Path(path))[:3]
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NiftiFormatError(f"{path}: non-finite HU values in data")
    return Volume3D(arr, spacing, origin)


def _sidecar(path: Path) -> Path:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return path.with_name(name[:-len(suffix)] + ".labels.json")
    return path.with_suffix(".labels.json")


def write_mask(path, mask: LabelMask) -> None:
    path = Path(path)
    _write_array(path, mask.labels, mask.spacing, mask.origin, 4)
    _sidecar(path).write_text(json.dumps(
        {"class_set": sorted(mask.class_set)}, indent=0) + "\n")


def read_mask(path) -> LabelMask:
    path = Path(path)
    arr, spacing, origin = _read_array(path)
    arr = np.ascontiguousarray(np.rint(arr)).astype(np.int16)
    side = _sidecar(path)
    if side.exists():
        class_set = frozenset(json.loads(side.read_text())["class_set"])
    else:
        class_set = frozenset(int(v) for v in np.unique(arr))
    return LabelMask(arr, spacing, origin, class_set=class_set)
