import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lacuna.errors import (
    BadMagic,
    InvalidVolume,
    NonPositivePixdim,
    ObliqueAffine,
    TruncatedPayload,
    UnsupportedDatatype,
)
from lacuna.volio import (
    HEADER_DTYPE,
    Volume3D,
    identity_volume,
    orientation_variants,
    parse_nifti1,
    reorient_to_ras,
    resample_nearest,
    resample_trilinear,
    write_nifti1,
)


def make_header(dims, datatype=16, bitpix=32, slope=0.0, inter=0.0, magic=b"n+1\0",
                pixdim=(1.0, 1.0, 1.0), order="<", vox_offset=352):
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder(order))
    hdr["sizeof_hdr"] = 348
    hdr["dim"] = [3, *dims, 1, 1, 1, 1]
    hdr["datatype"] = datatype
    hdr["bitpix"] = bitpix
    hdr["pixdim"] = [1.0, *pixdim, 0, 0, 0, 0]
    hdr["vox_offset"] = vox_offset
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    hdr["sform_code"] = 1
    hdr["srow_x"] = [pixdim[0], 0, 0, 0]
    hdr["srow_y"] = [0, pixdim[1], 0, 0]
    hdr["srow_z"] = [0, 0, pixdim[2], 0]
    hdr["magic"] = magic
    return hdr.tobytes() + b"\0" * (vox_offset - 348)


def test_volume_invariants():
    vol = identity_volume(np.zeros((2, 3, 4)), spacing=(1.0, 2.0, 0.5))
    assert vol.dims == (2, 3, 4)
    assert vol.spacing == (1.0, 2.0, 0.5)
    assert vol.data.dtype == np.float32
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1
    bad = np.diag([1.0, 1.0, 1.0, 1.0])
    bad[3, 0] = 1
    with pytest.raises(InvalidVolume):
        Volume3D(np.zeros((2, 2, 2)), bad)
    with pytest.raises(InvalidVolume):
        Volume3D(np.zeros((2, 2, 2)), np.eye(4), spacing=(2.0, 1.0, 1.0))


def test_parse_minimal_float32():
    payload = np.arange(8, dtype="<f4").reshape((2, 2, 2), order="F")
    raw = make_header((2, 2, 2)) + payload.tobytes(order="F")
    vol = parse_nifti1(raw)
    assert vol.dims == (2, 2, 2)
    np.testing.assert_array_equal(vol.data.ravel(order="F"), np.arange(8))


def test_parse_int16_scaling():
    raw = make_header((1, 1, 1), datatype=4, bitpix=16, slope=2.0, inter=1.0) + struct.pack("<h", 3)
    assert parse_nifti1(raw).data[0, 0, 0] == 7.0


def test_parse_uint8():
    raw = make_header((2, 1, 1), datatype=2, bitpix=8) + bytes([7, 250])
    np.testing.assert_array_equal(parse_nifti1(raw).data.ravel(), [7, 250])


def test_parse_big_endian():
    payload = np.arange(8, dtype=">f4").reshape((2, 2, 2), order="F")
    raw = make_header((2, 2, 2), order=">") + payload.tobytes(order="F")
    np.testing.assert_array_equal(parse_nifti1(raw).data.ravel(order="F"), np.arange(8))


def test_parse_errors():
    good = make_header((2, 2, 2)) + np.zeros(8, "<f4").tobytes()
    with pytest.raises(BadMagic):
        parse_nifti1(make_header((2, 2, 2), magic=b"abcd") + np.zeros(8, "<f4").tobytes())
    with pytest.raises(UnsupportedDatatype):
        parse_nifti1(make_header((2, 2, 2), datatype=64, bitpix=64) + b"\0" * 64)
    with pytest.raises(TruncatedPayload):
        parse_nifti1(good[:-1])
    with pytest.raises(NonPositivePixdim):
        parse_nifti1(make_header((2, 2, 2), pixdim=(1.0, 0.0, 1.0)) + np.zeros(8, "<f4").tobytes())


def test_write_layout():
    vol = identity_volume(np.full((1, 1, 1), 5.0))
    raw = write_nifti1(vol)
    assert len(raw) == 352 + 4
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder("<"))[0]
    assert hdr["magic"] == b"n+1"
    assert hdr["vox_offset"] == 352
    np.testing.assert_array_equal(hdr["pixdim"][1:4], [1, 1, 1])
    assert parse_nifti1(raw).data[0, 0, 0] == 5.0


def random_volume(rng, dims=None):
    dims = dims or tuple(int(n) for n in rng.integers(1, 6, size=3))
    spacing = rng.choice([0.5, 1.0, 1.25, 2.0], size=3)
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = rng.integers(-100, 100, size=3) * 0.5
    return Volume3D(rng.standard_normal(dims).astype(np.float32), affine)


def test_roundtrip_random_4x3x2():
    rng = np.random.default_rng(1)
    vol = random_volume(rng, (4, 3, 2))
    back = parse_nifti1(write_nifti1(vol))
    assert back.dims == vol.dims
    assert back.spacing == vol.spacing
    np.testing.assert_array_equal(back.affine, vol.affine)
    assert back.data.tobytes() == vol.data.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_property(seed):
    vol = random_volume(np.random.default_rng(seed))
    back = parse_nifti1(write_nifti1(vol))
    assert back.data.tobytes() == vol.data.tobytes()
    np.testing.assert_allclose(back.affine, vol.affine, atol=1e-6)


def _world_value_map(vol):
    world = vol.world_coords().reshape(-1, 3)
    return {tuple(np.round(w, 6)): v for w, v in zip(world, vol.data.reshape(-1))}


def test_reorient_identity_on_ras():
    vol = random_volume(np.random.default_rng(2), (3, 4, 5))
    out = reorient_to_ras(vol)
    np.testing.assert_array_equal(out.data, vol.data)
    np.testing.assert_array_equal(out.affine, vol.affine)


def test_reorient_lps():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((3, 4, 5))
    affine = np.diag([-1.0, -1.0, 1.0, 1.0])
    affine[:3, 3] = [10, 20, -5]
    vol = Volume3D(data, affine)
    out = reorient_to_ras(vol)
    np.testing.assert_array_equal(out.data, vol.data[::-1, ::-1, :])
    assert _world_value_map(out) == _world_value_map(vol)


def test_reorient_permuted_axes():
    data = np.arange(24, dtype=float).reshape(2, 3, 4)
    affine = np.zeros((4, 4))
    affine[2, 0] = 2.0  # voxel axis 0 -> world z
    affine[0, 1] = 1.0
    affine[1, 2] = 1.5
    affine[3, 3] = 1.0
    vol = Volume3D(data, affine)
    out = reorient_to_ras(vol)
    assert out.dims == (3, 4, 2)
    np.testing.assert_array_equal(out.data, np.transpose(data, (1, 2, 0)))
    np.testing.assert_allclose(np.diag(out.affine)[:3], [1.0, 1.5, 2.0])
    assert _world_value_map(out) == _world_value_map(vol)


def test_reorient_properties_all_variants():
    vol = random_volume(np.random.default_rng(4), (2, 3, 4))
    variants = orientation_variants(vol)
    assert len(variants) == 48
    for v in variants:
        once = reorient_to_ras(v)
        twice = reorient_to_ras(once)
        np.testing.assert_array_equal(once.data, twice.data)
        np.testing.assert_array_equal(once.affine, twice.affine)
        assert sorted(once.data.ravel()) == sorted(v.data.ravel())
        block = once.affine[:3, :3]
        assert np.all(np.diag(block) > 0)
        assert np.allclose(block - np.diag(np.diag(block)), 0, atol=1e-6)


def test_reorient_rejects_oblique():
    c, s = np.cos(0.3), np.sin(0.3)
    affine = np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    with pytest.raises(ObliqueAffine):
        reorient_to_ras(Volume3D(np.zeros((2, 2, 2)), affine))


def test_resample_identity_and_constant():
    rng = np.random.default_rng(5)
    vol = random_volume(rng, (5, 6, 7))
    same = resample_trilinear(vol, vol.spacing)
    assert same.dims == vol.dims
    assert np.max(np.abs(same.data - vol.data)) < 1e-5

    const = identity_volume(np.full((4, 5, 6), 3.5), spacing=(2.0, 1.0, 1.5))
    out = resample_trilinear(const, (1.0, 1.0, 1.0))
    assert out.dims == (8, 5, 9)
    np.testing.assert_allclose(out.data, 3.5, atol=1e-6)


def test_resample_dims_ceil():
    vol = identity_volume(np.ones((5, 5, 1)), spacing=(1.0, 1.0, 3.0))
    out = resample_trilinear(vol, (2.0, 2.0, 2.0))
    assert out.dims == (3, 3, 2)


def test_resample_affine_ramp():
    # analytic oracle: values a.x + b of world position
    affine = np.diag([2.0, 1.5, 1.0, 1.0])
    affine[:3, 3] = [3.0, -2.0, 7.0]
    vol = Volume3D(np.zeros((10, 12, 9)), affine)
    a, b = np.array([0.3, -0.2, 0.5]), 1.7
    vol = vol.with_data(vol.world_coords() @ a + b)
    out = resample_trilinear(vol, (1.0, 1.0, 1.0))
    expected = out.world_coords() @ a + b
    # interior: output positions whose source index stays within [0, n-1]
    world = out.world_coords()
    idx = (world - affine[:3, 3]) / np.diag(affine)[:3]
    interior = np.all((idx >= 0) & (idx <= np.array(vol.dims) - 1), axis=-1)
    assert interior.sum() > 100
    assert np.max(np.abs(out.data[interior] - expected[interior])) < 1e-4


def test_resample_outside_extent_is_zero():
    vol = identity_volume(np.ones((4, 4, 4)), spacing=(1.0, 1.0, 1.0))
    out = resample_trilinear(vol, (3.0, 3.0, 3.0))
    assert out.dims == (2, 2, 2)
    assert np.all(np.isfinite(out.data))


def test_resample_twice_is_stable_on_smooth_phantom():
    x, y, z = np.meshgrid(*[np.linspace(0, 1, 24)] * 3, indexing="ij")
    data = np.sin(2 * np.pi * 0.5 * x) * np.cos(2 * np.pi * 0.4 * y) + z
    vol = identity_volume(data, spacing=(1.0, 1.0, 1.0))
    once = resample_trilinear(vol, (1.5, 1.5, 1.5))
    twice = resample_trilinear(once, (1.5, 1.5, 1.5))
    assert np.max(np.abs(once.data - twice.data)) < 1e-3


def test_resample_nearest_keeps_labels():
    labels = np.zeros((6, 6, 6))
    labels[2:4, 2:4, 2:4] = 3
    out = resample_nearest(identity_volume(labels), (0.5, 0.5, 0.5))
    assert set(np.unique(out.data)) <= {0.0, 3.0}
