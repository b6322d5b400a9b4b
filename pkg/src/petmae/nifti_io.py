"""Reader/writer for single-file NIfTI-1 volumes (int16 and float32 only).

Only the header fields listed in :data:`HEADER_FIELDS` are interpreted; the
rest of the 348-byte header is carried as padding.  Files are always written
little-endian float32 with an sform affine; reads accept either byte order.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadDims,
    BadMagic,
    IoFailure,
    MultiChannel,
    NiftiError,
    TruncatedData,
    UnsupportedDatatype,
)
from .volume import Volume

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: "i2", DT_FLOAT32: "f4"}

# (name, struct format, byte offset) for every interpreted field.
HEADER_FIELDS = (
    ("sizeof_hdr", "i", 0),
    ("dim", "8h", 40),
    ("datatype", "h", 70),
    ("bitpix", "h", 72),
    ("pixdim", "8f", 76),
    ("vox_offset", "f", 108),
    ("scl_slope", "f", 112),
    ("scl_inter", "f", 116),
    ("xyzt_units", "B", 123),
    ("qform_code", "h", 252),
    ("sform_code", "h", 254),
    ("srow_x", "4f", 280),
    ("srow_y", "4f", 296),
    ("srow_z", "4f", 312),
    ("magic", "4s", 344),
)
_MAGICS = (b"n+1\x00", b"ni1\x00")


@dataclass
class NiftiHeader:
    sizeof_hdr: int = HEADER_SIZE
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = DT_FLOAT32
    bitpix: int = 32
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    vox_offset: float = float(SINGLE_FILE_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    xyzt_units: int = 2  # mm
    qform_code: int = 0
    sform_code: int = 1
    srow_x: tuple = (1.0, 0.0, 0.0, 0.0)
    srow_y: tuple = (0.0, 1.0, 0.0, 0.0)
    srow_z: tuple = (0.0, 0.0, 1.0, 0.0)
    magic: bytes = b"n+1\x00"
    endian: str = field(default="<", compare=False)

    @property
    def shape_xyz(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.dim[1 : 1 + self.dim[0]])

    @property
    def spacing_xyz(self) -> tuple[float, float, float]:
        return tuple(float(p) for p in self.pixdim[1:4])


def _detect_endian(raw: bytes) -> str:
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            return endian
    raise NiftiError("sizeof_hdr is not 348 in either byte order")


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) != HEADER_SIZE:
        raise NiftiError(f"header must be exactly {HEADER_SIZE} bytes, got {len(raw)}")
    if raw[344:348] not in _MAGICS:
        raise BadMagic(f"bad magic {raw[344:348]!r}")
    endian = _detect_endian(raw)
    values = {}
    for name, fmt, offset in HEADER_FIELDS:
        got = struct.unpack_from(endian + fmt, raw, offset)
        values[name] = got[0] if len(got) == 1 else tuple(got)
    hdr = NiftiHeader(**values, endian=endian)
    if hdr.datatype not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype} not in {sorted(_DTYPES)}")
    ndim = hdr.dim[0]
    if ndim not in (3, 4) or any(d < 1 for d in hdr.dim[1 : 1 + ndim]):
        raise BadDims(f"unsupported dim {hdr.dim}")
    if ndim == 4 and hdr.dim[4] != 1:
        raise BadDims("only single-frame 4D files are supported")
    if hdr.vox_offset < SINGLE_FILE_OFFSET:
        raise NiftiError(f"vox_offset {hdr.vox_offset} < {SINGLE_FILE_OFFSET}")
    return hdr


def pack_header(hdr: NiftiHeader) -> bytes:
    buf = bytearray(HEADER_SIZE)
    for name, fmt, offset in HEADER_FIELDS:
        value = getattr(hdr, name)
        args = value if isinstance(value, tuple) else (value,)
        struct.pack_into(hdr.endian + fmt, buf, offset, *args)
    return bytes(buf)


def _decode(hdr: NiftiHeader, payload: bytes) -> np.ndarray:
    nx, ny, nz = hdr.shape_xyz[:3]
    dtype = np.dtype(_DTYPES[hdr.datatype]).newbyteorder(hdr.endian)
    count = nx * ny * nz
    if len(payload) < count * dtype.itemsize:
        raise TruncatedData(f"payload holds {len(payload)} bytes, need {count * dtype.itemsize}")
    # x varies fastest on disk, which is C order for a (z, y, x) array.
    data = np.frombuffer(payload, dtype=dtype, count=count).reshape(nz, ny, nx).astype(np.float64)
    slope = hdr.scl_slope if hdr.scl_slope != 0.0 and np.isfinite(hdr.scl_slope) else 1.0
    inter = hdr.scl_inter if np.isfinite(hdr.scl_inter) else 0.0
    if slope != 1.0 or inter != 0.0:
        data = data * np.float64(slope) + np.float64(inter)
    return data


def _origin_zyx(hdr: NiftiHeader) -> tuple[float, float, float]:
    if hdr.sform_code >= 1:
        return (float(hdr.srow_z[3]), float(hdr.srow_y[3]), float(hdr.srow_x[3]))
    return (0.0, 0.0, 0.0)


def read_nifti(path) -> Volume:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"{path}: file shorter than the header")
    hdr = parse_header(raw[:HEADER_SIZE])
    data = _decode(hdr, raw[int(hdr.vox_offset) :])
    sx, sy, sz = hdr.spacing_xyz
    return Volume(data, spacing=(sz, sy, sx), origin=_origin_zyx(hdr))


def header_for(volume: Volume) -> NiftiHeader:
    sz, sy, sx = volume.spacing
    oz, oy, ox = volume.origin
    nz, ny, nx = volume.shape
    return NiftiHeader(
        dim=(3, nx, ny, nz, 1, 1, 1, 1),
        pixdim=(1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0),
        srow_x=(sx, 0.0, 0.0, ox),
        srow_y=(0.0, sy, 0.0, oy),
        srow_z=(0.0, 0.0, sz, oz),
    )


def encode_nifti(volume: Volume) -> bytes:
    if volume.channels != 1:
        raise MultiChannel(f"NIfTI output holds one channel, volume has {volume.channels}")
    hdr = header_for(volume)
    payload = np.ascontiguousarray(volume.data[0], dtype="<f4").tobytes()
    return pack_header(hdr) + b"\x00" * (SINGLE_FILE_OFFSET - HEADER_SIZE) + payload


def atomic_write_bytes(path, blob: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoFailure(str(exc)) from exc


def write_nifti(volume: Volume, path) -> None:
    atomic_write_bytes(path, encode_nifti(volume))
