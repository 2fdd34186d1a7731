"""
Volume I/O Module for voxsynth
Loads, saves, normalizes, downsamples and exports 3D scalar volumes.

Formats:
- NIfTI-1 (read only): uncompressed ``n+1`` single files and ``ni1`` header/image pairs,
  datatypes uint8, int16 and float32, either byte order.
- RVOL: the toolkit's own little-endian container, bit-exact round trip.
- PGM (P5): 8-bit slice snapshots for visual inspection.

Voxel arrays are indexed ``data[i0, i1, i2]``; on disk axis 0 varies fastest.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    BadMagicError,
    CompressedInputError,
    EndiannessError,
    NiftiHeaderError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    ValueRangeError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

WORKING_DTYPE = np.float32

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
_RVOL_HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "<u4"),
    ("dims", "<u4", (3,)),
    ("spacing", "<f4", (3,)),
])

# Standard 348-byte NIfTI-1 header; byte order is applied after detection.
NIFTI_HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
NIFTI_HEADER_SIZE = 348

NIFTI_DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    16: np.dtype("f4"),
}

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Volume:
    """
    A 3D scalar grid with voxel spacing.

    Attributes:
        data: float32 array of shape ``dims``; read-only once constructed
        spacing: millimetres per voxel along each axis
    """
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=WORKING_DTYPE, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be 3D with positive dims, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueRangeError("volume contains non-finite values")
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueRangeError(f"spacing must be 3 positive values, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def slice(self, axis: int, index: int) -> np.ndarray:
        """2D slice along ``axis`` (0, 1 or 2)."""
        if axis not in (0, 1, 2):
            raise ValueRangeError(f"axis must be 0, 1 or 2, got {axis}")
        if not 0 <= index < self.dims[axis]:
            raise ValueRangeError(f"slice index {index} outside [0, {self.dims[axis]})")
        return np.take(self.data, index, axis=axis)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.spacing == other.spacing
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


# NIfTI-1

def _parse_nifti_header(raw: bytes) -> Tuple[np.void, str]:
    for order in ("<", ">"):
        header = np.frombuffer(raw[:NIFTI_HEADER_SIZE], dtype=NIFTI_HEADER_DTYPE.newbyteorder(order))[0]
        if 1 <= int(header["dim"][0]) <= 7:
            if int(header["sizeof_hdr"]) != NIFTI_HEADER_SIZE:
                raise NiftiHeaderError(f"sizeof_hdr is {int(header['sizeof_hdr'])}, expected 348")
            return header, order
    raise EndiannessError("dim[0] is outside [1, 7] under both byte orders")


def read_nifti(path: PathLike) -> Volume:
    """Read an uncompressed NIfTI-1 volume (``n+1`` or ``ni1``)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise CompressedInputError(f"{path} is gzip-compressed; decompress it first")
    if len(raw) < NIFTI_HEADER_SIZE:
        raise NiftiHeaderError(f"{path} is shorter than a NIfTI-1 header ({len(raw)} bytes)")

    header, order = _parse_nifti_header(raw)
    magic = bytes(header["magic"])
    if magic not in (b"n+1", b"ni1"):
        raise NiftiHeaderError(f"bad NIfTI magic {magic!r}")

    code = int(header["datatype"])
    if code not in NIFTI_DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {code} is not one of uint8, int16, float32")
    dtype = NIFTI_DATATYPES[code].newbyteorder(order)

    ndim = int(header["dim"][0])
    shape = [int(d) for d in header["dim"][1:ndim + 1]] + [1] * (7 - ndim)
    if min(shape) < 1:
        raise NiftiHeaderError(f"non-positive dimension in {shape[:ndim]}")
    if any(d != 1 for d in shape[3:]):
        raise NiftiHeaderError(f"only 3D volumes are supported, got dims {shape[:ndim]}")
    dims = tuple(shape[:3])

    offset = int(header["vox_offset"])
    if magic == b"ni1":
        payload = path.with_suffix(".img").read_bytes()
    else:
        payload = raw
        offset = max(offset, NIFTI_HEADER_SIZE)
    count = int(np.prod(dims))
    if len(payload) < offset + count * dtype.itemsize:
        raise NiftiHeaderError(f"{path} holds fewer voxels than dims {dims} require")

    values = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    values = values.reshape(dims, order="F").astype(np.float64)
    slope = float(header["scl_slope"])
    if slope != 0 and np.isfinite(slope):
        values = values * slope + float(header["scl_inter"])

    spacing = tuple(abs(float(p)) or 1.0 for p in header["pixdim"][1:4])
    logger.debug("read NIfTI %s dims=%s datatype=%d byteorder=%s", path, dims, code, order)
    return Volume(values.astype(WORKING_DTYPE), spacing)


# RVOL

def write_rvol(volume: Volume, path: PathLike) -> None:
    header = np.zeros((), dtype=_RVOL_HEADER)
    header["magic"] = RVOL_MAGIC
    header["version"] = RVOL_VERSION
    header["dims"] = volume.dims
    header["spacing"] = volume.spacing
    payload = np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.tobytes() + payload)


def read_rvol(path: PathLike) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:4] != RVOL_MAGIC:
        raise BadMagicError(f"{path} does not start with RVOL magic")
    if len(raw) < _RVOL_HEADER.itemsize:
        raise TruncatedPayloadError(f"{path} ends inside the RVOL header")
    header = np.frombuffer(raw, dtype=_RVOL_HEADER, count=1)[0]
    if int(header["version"]) != RVOL_VERSION:
        raise VersionMismatchError(f"RVOL version {int(header['version'])}, expected {RVOL_VERSION}")
    dims = tuple(int(d) for d in header["dims"])
    expected = _RVOL_HEADER.itemsize + 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path} has {len(raw)} bytes, dims {dims} need {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_RVOL_HEADER.itemsize).reshape(dims, order="F")
    return Volume(data, tuple(float(s) for s in header["spacing"]))


# Intensity and resolution

def normalize_minmax(volume: Volume) -> Volume:
    """Affine map to [0, 1]; a constant volume maps to zeros."""
    data = volume.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return Volume(np.zeros_like(data), volume.spacing)
    return Volume((data - lo) / (hi - lo), volume.spacing)


def _per_axis(factor: Union[int, Sequence[int]]) -> Tuple[int, int, int]:
    if np.isscalar(factor):
        factor = (int(factor),) * 3
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or min(factor) < 1:
        raise ValueRangeError(f"factor must be a positive integer per axis, got {factor}")
    return factor


def block_means(data: np.ndarray, factor: Union[int, Sequence[int]]) -> np.ndarray:
    """Mean of each non-overlapping block, computed in float64."""
    fx, fy, fz = _per_axis(factor)
    nx, ny, nz = data.shape
    if nx % fx or ny % fy or nz % fz:
        raise ShapeError(f"dims {data.shape} are not divisible by factor {(fx, fy, fz)}")
    blocks = np.asarray(data, dtype=np.float64).reshape(nx // fx, fx, ny // fy, fy, nz // fz, fz)
    return blocks.mean(axis=(1, 3, 5))


def downsample_meanpool(volume: Volume, factor: Union[int, Sequence[int]]) -> Volume:
    factor = _per_axis(factor)
    spacing = tuple(s * f for s, f in zip(volume.spacing, factor))
    return Volume(block_means(volume.data, factor), spacing)


# PGM snapshots

def export_slice_pgm(volume: Volume, axis: int, index: int, path: PathLike) -> None:
    """Write one slice as binary PGM; rows follow the lower remaining axis."""
    image = volume.slice(axis, index).astype(np.float64)
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueRangeError("PGM export needs values in [0, 1]; normalize first")
    # half away from zero, values are non-negative here
    pixels = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    height, width = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    """Parse a P5 file written by ``export_slice_pgm`` back to values in [0, 1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise BadMagicError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != width * height:
        raise TruncatedPayloadError(f"{path} holds {pixels.size} pixels, expected {width * height}")
    return pixels.reshape(height, width).astype(np.float64) / maxval


def load_volume(path: PathLike) -> Volume:
    """Dispatch on file suffix: ``.rvol``, ``.nii`` or ``.hdr``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".rvol":
        return read_rvol(path)
    if suffix in (".nii", ".hdr"):
        return read_nifti(path)
    if suffix == ".gz":
        raise CompressedInputError(f"{path} is compressed; decompress it first")
    raise BadMagicError(f"unrecognised volume file {path}")


def save_volume(volume: Volume, path: PathLike, mask: Optional[np.ndarray] = None) -> None:
    """Write ``volume`` as RVOL; ``mask`` (if any) goes to a ``_coverage.rvol`` sidecar."""
    path = Path(path)
    write_rvol(volume, path)
    if mask is not None:
        write_rvol(Volume(mask.astype(WORKING_DTYPE), volume.spacing),
                   path.with_name(path.stem + "_coverage.rvol"))
