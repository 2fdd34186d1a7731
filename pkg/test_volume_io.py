#!/usr/bin/env python3
"""
Volume I/O tests: NIfTI fixtures, RVOL round trips, normalization,
downsampling and PGM export.
"""

import gzip
import os
import struct
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from errors import (
    BadMagicError,
    CompressedInputError,
    EndiannessError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    ValueRangeError,
    VersionMismatchError,
)
from volume_io import (
    Volume,
    block_means,
    downsample_meanpool,
    export_slice_pgm,
    load_volume,
    normalize_minmax,
    read_nifti,
    read_pgm,
    read_rvol,
    save_volume,
    write_rvol,
)

CODES = {np.dtype("u1"): 2, np.dtype("i2"): 4, np.dtype("f4"): 16}


def nifti_bytes(data, order="<", slope=0.0, inter=0.0, spacing=(1.0, 1.0, 1.0), magic=b"n+1\0",
                vox_offset=352, sizeof_hdr=348, code=None, dim0=3):
    """Minimal NIfTI-1 file built field by field."""
    dtype = np.dtype(data.dtype)
    header = bytearray(348)
    struct.pack_into(order + "i", header, 0, sizeof_hdr)
    struct.pack_into(order + "8h", header, 40, dim0, *data.shape, 1, 1, 1, 1)
    struct.pack_into(order + "h", header, 70, code if code is not None else CODES[dtype])
    struct.pack_into(order + "h", header, 72, dtype.itemsize * 8)
    struct.pack_into(order + "8f", header, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into(order + "f", header, 108, float(vox_offset))
    struct.pack_into(order + "f", header, 112, slope)
    struct.pack_into(order + "f", header, 116, inter)
    header[344:348] = magic
    payload = np.asarray(data, dtype=dtype.newbyteorder(order)).tobytes(order="F")
    if magic.startswith(b"ni1"):
        return bytes(header), payload
    return bytes(header) + b"\0" * (vox_offset - 348) + payload


@pytest.mark.parametrize("order", ["<", ">"])
@pytest.mark.parametrize("dtype", ["u1", "i2", "f4"])
def test_nifti_datatypes_and_byte_orders(tmp_path, order, dtype):
    rng = np.random.default_rng(3)
    data = (rng.integers(0, 100, size=(4, 5, 6))).astype(dtype)
    path = tmp_path / "vol.nii"
    path.write_bytes(nifti_bytes(data, order, spacing=(1.5, 2.0, 2.5)))
    volume = read_nifti(path)
    assert volume.dims == (4, 5, 6)
    assert volume.spacing == (1.5, 2.0, 2.5)
    np.testing.assert_array_equal(volume.data, data.astype(np.float32))


def test_nifti_axis_zero_is_fastest(tmp_path):
    data = np.zeros((3, 2, 2), dtype="f4")
    data[1, 0, 0] = 7.0
    path = tmp_path / "vol.nii"
    path.write_bytes(nifti_bytes(data))
    raw = path.read_bytes()
    # second float of the payload is voxel (1, 0, 0)
    assert struct.unpack_from("<f", raw, 352 + 4)[0] == 7.0
    assert read_nifti(path).data[1, 0, 0] == 7.0


def test_nifti_scaling_applied(tmp_path):
    data = np.arange(8, dtype="i2").reshape(2, 2, 2)
    path = tmp_path / "vol.nii"
    path.write_bytes(nifti_bytes(data, slope=2.0, inter=1.0))
    np.testing.assert_array_equal(read_nifti(path).data, data * 2.0 + 1.0)


def test_nifti_zero_slope_means_unscaled(tmp_path):
    data = np.arange(8, dtype="u1").reshape(2, 2, 2)
    path = tmp_path / "vol.nii"
    path.write_bytes(nifti_bytes(data, slope=0.0, inter=5.0))
    np.testing.assert_array_equal(read_nifti(path).data, data.astype(np.float32))


def test_nifti_header_image_pair(tmp_path):
    data = np.arange(24, dtype="f4").reshape(2, 3, 4)
    header, payload = nifti_bytes(data, magic=b"ni1\0", vox_offset=0)
    (tmp_path / "pair.hdr").write_bytes(header)
    (tmp_path / "pair.img").write_bytes(payload)
    np.testing.assert_array_equal(load_volume(tmp_path / "pair.hdr").data, data)


def test_nifti_rejects_gzip(tmp_path):
    path = tmp_path / "vol.nii.gz"
    path.write_bytes(gzip.compress(nifti_bytes(np.zeros((2, 2, 2), "f4"))))
    with pytest.raises(CompressedInputError):
        read_nifti(path)
    with pytest.raises(CompressedInputError):
        load_volume(path)


def test_nifti_unsupported_datatype(tmp_path):
    path = tmp_path / "vol.nii"
    path.write_bytes(nifti_bytes(np.zeros((2, 2, 2), "f4"), code=64))
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(path)


def test_nifti_bad_dim0_under_both_orders(tmp_path):
    path = tmp_path / "vol.nii"
    path.write_bytes(nifti_bytes(np.zeros((2, 2, 2), "f4"), dim0=9))
    with pytest.raises(EndiannessError):
        read_nifti(path)


def test_nifti_matches_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(11)
    data = rng.standard_normal((5, 4, 3)).astype(np.float32)
    image = nib.Nifti1Image(data, np.diag([1.25, 1.5, 2.0, 1.0]))
    image.header.set_data_dtype(np.float32)
    path = tmp_path / "nib.nii"
    nib.save(image, str(path))
    volume = read_nifti(path)
    np.testing.assert_allclose(volume.data, np.asarray(image.dataobj), rtol=0, atol=0)
    assert volume.spacing == (1.25, 1.5, 2.0)


def test_rvol_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "v.rvol"
    for _ in range(1000):
        dims = tuple(int(d) for d in rng.integers(1, 9, size=3))
        volume = Volume(rng.standard_normal(dims), tuple(rng.uniform(0.5, 3.0, size=3)))
        write_rvol(volume, path)
        loaded = read_rvol(path)
        assert loaded.dims == volume.dims
        assert loaded.data.tobytes() == volume.data.tobytes()
        assert loaded.spacing == volume.spacing


def test_rvol_errors(tmp_path):
    volume = Volume(np.ones((2, 3, 4)))
    path = tmp_path / "v.rvol"
    write_rvol(volume, path)
    raw = path.read_bytes()

    (tmp_path / "bad.rvol").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_rvol(tmp_path / "bad.rvol")

    (tmp_path / "short.rvol").write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError):
        read_rvol(tmp_path / "short.rvol")

    future = bytearray(raw)
    struct.pack_into("<I", future, 4, 2)
    (tmp_path / "future.rvol").write_bytes(bytes(future))
    with pytest.raises(VersionMismatchError):
        read_rvol(tmp_path / "future.rvol")


def test_volume_is_read_only_and_finite():
    volume = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        volume.data[0, 0, 0] = 1.0
    with pytest.raises(ValueRangeError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2)))


def test_normalize_minmax():
    volume = normalize_minmax(Volume(np.arange(8, dtype=float).reshape(2, 2, 2) * 3 - 5))
    assert volume.data.min() == 0.0
    assert volume.data.max() == 1.0
    assert normalize_minmax(Volume(np.full((2, 2, 2), 4.0))).data.max() == 0.0


def test_block_means_against_loop():
    rng = np.random.default_rng(5)
    data = rng.random((4, 6, 8))
    means = block_means(data, (2, 3, 4))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                expected = data[2 * i:2 * i + 2, 3 * j:3 * j + 3, 4 * k:4 * k + 4].mean()
                assert means[i, j, k] == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ShapeError):
        block_means(data, 3)


def test_downsample_scales_spacing():
    volume = downsample_meanpool(Volume(np.ones((4, 4, 4)), (1.0, 2.0, 1.0)), 2)
    assert volume.dims == (2, 2, 2)
    assert volume.spacing == (2.0, 4.0, 2.0)


def test_pgm_export_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    volume = Volume(rng.random((5, 6, 7)))
    path = tmp_path / "slice.pgm"
    export_slice_pgm(volume, 2, 3, path)
    assert path.read_bytes().startswith(b"P5\n6 5\n255\n")
    pixels = read_pgm(path)
    expected = np.floor(volume.slice(2, 3).astype(np.float64) * 255 + 0.5) / 255
    np.testing.assert_allclose(pixels, expected, atol=1e-12)


def test_pgm_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueRangeError):
        export_slice_pgm(Volume(np.full((2, 2, 2), 1.5)), 0, 0, tmp_path / "x.pgm")


def test_save_volume_writes_coverage_sidecar(tmp_path):
    volume = Volume(np.ones((2, 2, 2)))
    mask = np.zeros((2, 2, 2), dtype=bool)
    mask[0] = True
    save_volume(volume, tmp_path / "sub000.rvol", mask)
    coverage = read_rvol(tmp_path / "sub000_coverage.rvol")
    np.testing.assert_array_equal(coverage.data > 0.5, mask)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
