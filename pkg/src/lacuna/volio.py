"""Volume data model and a minimal single-file NIfTI-1 reader/writer.

Arrays are indexed ``data[i, j, k]`` with ``i`` the fastest-varying axis on
disk (NIfTI stores voxels in Fortran order).  Only uncompressed ``.nii``
images with uint8, int16 or float32 payloads are handled.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .errors import (
    BadHeader,
    BadMagic,
    GridMismatch,
    InvalidVolume,
    NonPositivePixdim,
    ObliqueAffine,
    TruncatedPayload,
    UnsupportedDatatype,
    UnsupportedDimensions,
)

HEADER_DTYPE = np.dtype([
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
assert HEADER_DTYPE.itemsize == 348

# NIfTI datatype code -> (numpy dtype char, bitpix)
DATATYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32)}
WRITE_VOX_OFFSET = 352


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar 3D grid with a voxel-to-world affine (mm).

    ``spacing`` defaults to the column norms of the affine's 3x3 block.
    The data array is copied to float32 and frozen.
    """

    data: np.ndarray
    affine: np.ndarray
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidVolume(f"expected a non-empty 3D grid, got shape {data.shape}")
        data.flags.writeable = False
        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise InvalidVolume(f"affine must be 4x4, got {affine.shape}")
        if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidVolume("affine last row must be (0, 0, 0, 1)")
        affine.flags.writeable = False
        norms = np.linalg.norm(affine[:3, :3], axis=0)
        spacing = norms if self.spacing is None else np.asarray(self.spacing, dtype=np.float64)
        if spacing.shape != (3,) or np.any(spacing <= 0):
            raise InvalidVolume(f"spacing must be three positive values, got {spacing}")
        if np.any(np.abs(norms - spacing) > 1e-4 * spacing):
            raise InvalidVolume(f"affine column norms {norms} disagree with spacing {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume3D":
        """Same grid, new values."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GridMismatch(f"shape {data.shape} does not match grid {self.data.shape}")
        return Volume3D(data, self.affine, self.spacing)

    def same_grid(self, other: "Volume3D", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.affine, other.affine, rtol=0, atol=atol)
        )

    def world_coords(self) -> np.ndarray:
        """World position (mm) of every voxel centre, shape ``dims + (3,)``."""
        idx = np.indices(self.dims, dtype=np.float64)
        a = self.affine
        return np.einsum("ij,j...->...i", a[:3, :3], idx) + a[:3, 3]


def check_same_grid(*vols: Volume3D, atol: float = 1e-6) -> None:
    first = vols[0]
    for v in vols[1:]:
        if not first.same_grid(v, atol):
            raise GridMismatch(f"grid mismatch: {first.dims} vs {v.dims}")


def identity_volume(data, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Wrap an array on an axis-aligned RAS grid with origin at voxel 0."""
    return Volume3D(data, np.diag([*spacing, 1.0]))


# NIfTI-1 ------------------------------------------------------------------

def _read_header(raw: bytes) -> np.ndarray:
    if len(raw) < 348:
        raise BadHeader(f"need at least 348 header bytes, got {len(raw)}")
    for order in "<>":
        dt = HEADER_DTYPE.newbyteorder(order)
        hdr = np.frombuffer(raw[:348], dtype=dt)[0]
        if hdr["sizeof_hdr"] == 348:
            return hdr
    raise BadHeader("sizeof_hdr is not 348 in either byte order")


def parse_nifti1(raw: bytes) -> Volume3D:
    """Decode an uncompressed single-file NIfTI-1 image."""
    raw = bytes(raw)
    hdr = _read_header(raw)
    magic = bytes(hdr["magic"]).ljust(4, b"\0")
    if magic not in (b"n+1\0", b"ni1\0"):
        raise BadMagic(f"unrecognised magic {magic!r}")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} not supported (use 2, 4 or 16)")

    dim = [int(d) for d in hdr["dim"]]
    if dim[0] not in (3, 4) or (dim[0] == 4 and dim[4] != 1):
        raise UnsupportedDimensions(f"only single 3D volumes are supported, dim={dim}")
    shape = tuple(dim[1:4])
    if min(shape) < 1:
        raise UnsupportedDimensions(f"dimensions must be >= 1, got {shape}")

    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = pixdim[1:4]
    if np.any(spacing <= 0):
        raise NonPositivePixdim(f"pixdim[1..3] = {spacing.tolist()}")

    # two-file headers concatenated with their payload start right after
    offset = int(hdr["vox_offset"])
    if magic == b"ni1\0" and offset < 348:
        offset = 348
    char, _ = DATATYPES[code]
    elem = np.dtype(char).newbyteorder(hdr.dtype["sizeof_hdr"].byteorder)
    count = int(np.prod(shape))
    need = count * elem.itemsize
    if len(raw) - offset < need:
        raise TruncatedPayload(f"payload has {max(len(raw) - offset, 0)} bytes, need {need}")
    stored = np.frombuffer(raw, dtype=elem, count=count, offset=offset).reshape(shape, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and not (slope == 1 and inter == 0):
        values = (stored.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        values = stored.astype(np.float32)

    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
    else:
        affine = np.diag([*spacing, 1.0])
    return Volume3D(values, affine, tuple(spacing))


def write_nifti1(vol: Volume3D) -> bytes:
    """Encode as little-endian float32 single-file NIfTI-1."""
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *vol.dims, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = WRITE_VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 2  # aligned
    hdr["srow_x"] = vol.affine[0]
    hdr["srow_y"] = vol.affine[1]
    hdr["srow_z"] = vol.affine[2]
    hdr["magic"] = b"n+1\0"
    payload = np.asarray(vol.data, dtype="<f4").tobytes(order="F")
    return hdr.tobytes() + b"\0" * (WRITE_VOX_OFFSET - 348) + payload


def load_nifti(path) -> Volume3D:
    return parse_nifti1(Path(path).read_bytes())


def save_nifti(vol: Volume3D, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_nifti1(vol))
    return path


# Orientation and resampling -------------------------------------------------

def _axis_mapping(block: np.ndarray, tol: float = 1e-3):
    """For each voxel axis return (world axis, sign); raise if oblique."""
    norms = np.linalg.norm(block, axis=0)
    mapping = []
    for j in range(3):
        col = block[:, j] / norms[j]
        w = int(np.argmax(np.abs(col)))
        off = np.delete(col, w)
        if np.any(np.abs(off) > tol):
            raise ObliqueAffine(f"voxel axis {j} is not aligned with a world axis: {col}")
        mapping.append((w, 1 if col[w] > 0 else -1))
    if len({w for w, _ in mapping}) != 3:
        raise ObliqueAffine("two voxel axes map onto the same world axis")
    return mapping


def reorient_to_ras(vol: Volume3D) -> Volume3D:
    """Permute/flip voxel axes so the affine block is positive diagonal.

    World coordinates of every value are preserved.  Sub-tolerance
    off-diagonal terms of an axis-aligned affine are dropped.
    """
    a = vol.affine
    mapping = _axis_mapping(a[:3, :3])
    data = vol.data
    translation = a[:3, 3].copy()
    new_block = np.zeros((3, 3))
    for j, (w, sign) in enumerate(mapping):
        col = a[:3, j]
        if sign < 0:
            translation += col * (vol.dims[j] - 1)
            data = np.flip(data, axis=j)
        new_block[w, w] = abs(col[w])
    # output axis w takes input axis j
    perm = [0, 0, 0]
    for j, (w, _) in enumerate(mapping):
        perm[w] = j
    data = np.transpose(data, perm)
    affine = np.eye(4)
    affine[:3, :3] = new_block
    affine[:3, 3] = translation
    return Volume3D(np.ascontiguousarray(data), affine)


def orientation_variants(vol: Volume3D):
    """All 48 axis-aligned relabelings of an RAS volume (6 permutations x 8 flips).

    Each variant stores the same world content with a different voxel layout.
    """
    from itertools import permutations

    out = []
    for perm in permutations(range(3)):
        for signs in product((1, -1), repeat=3):
            data = np.transpose(vol.data, perm)
            block = vol.affine[:3, :3][:, perm].copy()
            translation = vol.affine[:3, 3].copy()
            for j, s in enumerate(signs):
                if s < 0:
                    translation += block[:, j] * (data.shape[j] - 1)
                    block[:, j] = -block[:, j]
                    data = np.flip(data, axis=j)
            affine = np.eye(4)
            affine[:3, :3] = block
            affine[:3, 3] = translation
            out.append(Volume3D(np.ascontiguousarray(data), affine))
    return out


def _is_ras(vol: Volume3D) -> bool:
    block = vol.affine[:3, :3]
    return bool(np.all(np.diag(block) > 0) and np.allclose(block - np.diag(np.diag(block)), 0, atol=1e-6))


def _output_grid(vol: Volume3D, target_spacing):
    target = np.asarray(target_spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(target <= 0):
        raise InvalidVolume(f"target spacing must be three positive values, got {target_spacing}")
    src = np.asarray(vol.spacing)
    extent = np.asarray(vol.dims) * src
    dims = np.maximum(1, np.ceil(extent / target - 1e-9).astype(int))
    affine = np.eye(4)
    affine[:3, :3] = np.diag(target)
    # voxel extents of source and output share their lower corner
    affine[:3, 3] = vol.affine[:3, 3] + 0.5 * target - 0.5 * src
    positions = [((np.arange(n) + 0.5) * t) / s - 0.5 for n, t, s in zip(dims, target, src)]
    return tuple(int(d) for d in dims), affine, target, positions


def _interp_axis(x: np.ndarray, pos: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    inside = (pos >= -0.5) & (pos <= n - 0.5)
    p = np.clip(pos, 0, n - 1)
    i0 = np.floor(p).astype(int)
    i0 = np.minimum(i0, max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    w = p - i0
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    out = np.take(x, i0, axis=axis) * (1 - w) + np.take(x, i1, axis=axis) * w
    return out * inside.reshape(shape)


def resample_trilinear(vol: Volume3D, target_spacing) -> Volume3D:
    """Resample an RAS volume onto a grid with the given spacing.

    The output grid covers the same physical extent; samples more than half a
    voxel outside the source extent are 0.
    """
    if not _is_ras(vol):
        raise ObliqueAffine("resample_trilinear expects an RAS volume; call reorient_to_ras first")
    dims, affine, target, positions = _output_grid(vol, target_spacing)
    x = vol.data.astype(np.float64)
    for axis in range(3):
        x = _interp_axis(x, positions[axis], axis)
    return Volume3D(x.astype(np.float32), affine, tuple(target))


def resample_nearest(vol: Volume3D, target_spacing) -> Volume3D:
    """Nearest-neighbour resampling for label volumes."""
    if not _is_ras(vol):
        raise ObliqueAffine("resample_nearest expects an RAS volume; call reorient_to_ras first")
    dims, affine, target, positions = _output_grid(vol, target_spacing)
    x = vol.data
    for axis, pos in enumerate(positions):
        n = x.shape[axis]
        inside = (pos >= -0.5) & (pos <= n - 0.5)
        idx = np.clip(np.floor(pos + 0.5).astype(int), 0, n - 1)
        shape = [1, 1, 1]
        shape[axis] = -1
        x = np.take(x, idx, axis=axis) * inside.reshape(shape)
    return Volume3D(x, affine, tuple(target))
