"""Minimal NIfTI-1 volume I/O (.nii and .nii.gz).

Covers the single-file magic ("n+1"), plain little/big-endian headers, the
common scalar dtypes, scl_slope/scl_inter rescaling, and spacing/origin from
pixdim and the sform/qform offsets. Written files use a diagonal sform.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .preprocess import Volume

HEADER_SIZE = 348

_DTYPE_CODES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
    256: np.dtype("i1"),
    512: np.dtype("u2"),
    768: np.dtype("u4"),
}
_WRITE_CODES = {np.dtype("i2"): (4, 16), np.dtype("f4"): (16, 32), np.dtype("f8"): (64, 64)}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        if "w" in mode:
            # mtime=0 keeps written files byte-identical across reruns
            return gzip.GzipFile(path, mode, mtime=0)
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> Volume:
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: truncated NIfTI header")
    for end in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(end + "i", raw[0:4])
        if sizeof_hdr == HEADER_SIZE:
            break
    else:
        raise ValueError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise ValueError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack(end + "8h", raw[40:56])
    ndim = dim[0]
    if ndim < 3:
        raise ValueError(f"{path}: need a 3D volume, got dim0={ndim}")
    shape = tuple(int(d) for d in dim[1:4])
    if ndim > 3 and any(d > 1 for d in dim[4 : 1 + ndim]):
        raise ValueError(f"{path}: multi-frame NIfTI not supported (dim={dim})")
    (datatype,) = struct.unpack(end + "h", raw[70:72])
    dtype = _DTYPE_CODES.get(datatype)
    if dtype is None:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = dtype.newbyteorder(end)
    pixdim = struct.unpack(end + "8f", raw[76:108])
    spacing = np.abs(np.asarray(pixdim[1:4], dtype=np.float64))
    (vox_offset,) = struct.unpack(end + "f", raw[108:112])
    scl_slope, scl_inter = struct.unpack(end + "2f", raw[112:120])
    qform_code, sform_code = struct.unpack(end + "2h", raw[252:256])
    if sform_code > 0:
        srow = struct.unpack(end + "12f", raw[280:328])
        origin = np.asarray([srow[3], srow[7], srow[11]], dtype=np.float64)
    elif qform_code > 0:
        origin = np.asarray(struct.unpack(end + "3f", raw[268:280]), dtype=np.float64)
    else:
        origin = np.zeros(3)

    count = int(np.prod(shape))
    start = int(vox_offset) if vox_offset else HEADER_SIZE + 4
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    voxels = data.reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        voxels = voxels * slope + scl_inter
    return Volume(voxels, spacing, origin)


def write_nifti(path, volume: Volume, dtype: str = "int16") -> None:
    dt = np.dtype({"int16": "i2", "float32": "f4", "float64": "f8"}[dtype])
    datatype, bitpix = _WRITE_CODES[dt]
    voxels = volume.voxels
    if dt.kind == "i":
        voxels = np.round(voxels)
        info = np.iinfo(dt)
        if voxels.min() < info.min or voxels.max() > info.max:
            raise ValueError(f"volume range exceeds {dtype}")
    data = np.asfortranarray(voxels.astype(dt))

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = (3,) + tuple(volume.voxels.shape) + (1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, bitpix)
    pixdim = (1.0,) + tuple(float(s) for s in volume.spacing_mm) + (1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", header, 252, 0, 1)  # qform_code=0, sform_code=1
    ox, oy, oz = (float(v) for v in volume.origin_mm)
    sx, sy, sz = (float(s) for s in volume.spacing_mm)
    struct.pack_into("<12f", header, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    header[344:348] = b"n+1\x00"

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(struct.pack("<f", 0.0))  # header extension flag
        fh.write(data.tobytes(order="F"))
