"""Scan preprocessing: bias correction, intensity normalization, difference map."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import (
    DegenerateIntensities,
    EmptyMask,
    GridMismatch,
    IllConditionedFit,
    InvalidVolume,
    NonPositiveIntensity,
    ZeroMedian,
)
from .volio import Volume3D, check_same_grid

MAX_CONDITION = 1e10


@dataclass(frozen=True)
class BrainMasks:
    brain: Volume3D
    csf: Volume3D

    def __post_init__(self):
        check_same_grid(self.brain, self.csf)
        if np.any((self.csf.data > 0) & ~(self.brain.data > 0)):
            raise InvalidVolume("csf mask must be contained in the brain mask")

    @property
    def brain_bool(self) -> np.ndarray:
        return self.brain.data > 0

    @property
    def csf_bool(self) -> np.ndarray:
        return self.csf.data > 0


def _as_bool(mask: Volume3D | np.ndarray) -> np.ndarray:
    arr = mask.data if isinstance(mask, Volume3D) else np.asarray(mask)
    return arr > 0


def polynomial_exponents(order: int) -> list[tuple[int, int, int]]:
    """Monomial exponents of total degree <= order, constant term first."""
    terms = [e for e in product(range(order + 1), repeat=3) if sum(e) <= order]
    return sorted(terms, key=lambda e: (sum(e), tuple(-x for x in e)))


def _normalized_coords(shape, mask: np.ndarray) -> list[np.ndarray]:
    """Per-axis voxel coordinates mapped so the mask's bounding box spans [-1, 1]."""
    idx = np.nonzero(mask)
    coords = []
    for axis, n in enumerate(shape):
        lo, hi = idx[axis].min(), idx[axis].max()
        centre = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) if hi > lo else 1.0
        coords.append((np.arange(n, dtype=np.float64) - centre) / half)
    return coords


def _design(coords, exponents, where=None) -> np.ndarray:
    grids = np.meshgrid(*coords, indexing="ij")
    if where is not None:
        grids = [g[where] for g in grids]
    else:
        grids = [g.ravel() for g in grids]
    cols = [grids[0] ** ex * grids[1] ** ey * grids[2] ** ez for ex, ey, ez in exponents]
    return np.stack(cols, axis=1)


def bias_field_correct(vol: Volume3D, mask, order: int = 2) -> tuple[Volume3D, Volume3D]:
    """Remove a smooth multiplicative field by a log-domain polynomial fit.

    The field is ``exp(P)`` with ``P`` the least-squares polynomial of total
    degree ``order`` fitted to log-intensity over the mask, shifted so its
    geometric mean over the mask is 1.  Returns ``(corrected, field)``.
    """
    if not 1 <= order <= 4:
        raise ValueError(f"order must be in [1, 4], got {order}")
    m = _as_bool(mask)
    if m.shape != vol.dims:
        raise GridMismatch(f"mask shape {m.shape} does not match volume {vol.dims}")
    if not m.any():
        raise EmptyMask("bias field mask is empty")
    values = vol.data[m].astype(np.float64)
    if np.any(values <= 0):
        raise NonPositiveIntensity(f"{int(np.sum(values <= 0))} in-mask voxels are <= 0")

    exponents = polynomial_exponents(order)
    coords = _normalized_coords(vol.dims, m)
    design = _design(coords, exponents, where=m)
    normal = design.T @ design
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedFit(f"normal matrix condition number {cond:.3g} exceeds {MAX_CONDITION:g}")
    coef = np.linalg.solve(normal, design.T @ np.log(values))

    log_field = (_design(coords, exponents) @ coef).reshape(vol.dims)
    log_field -= log_field[m].mean()
    field = np.exp(log_field)
    corrected = vol.data.astype(np.float64) / field
    return vol.with_data(corrected), vol.with_data(field)


def normalize_scanwise(vol: Volume3D, mask) -> Volume3D:
    """Z-score within the mask (population sd); zero outside."""
    m = _as_bool(mask)
    values = vol.data[m].astype(np.float64)
    if values.size < 2:
        raise DegenerateIntensities("need at least two in-mask voxels")
    mu = values.mean()
    sd = values.std()
    if sd == 0 or not np.isfinite(sd):
        raise DegenerateIntensities("in-mask intensities have zero variance")
    out = np.zeros(vol.dims, dtype=np.float64)
    out[m] = (values - mu) / sd
    return vol.with_data(out)


def csf_normalize(vol: Volume3D, masks: BrainMasks) -> Volume3D:
    """Divide by the median CSF intensity (even counts: mean of middle two)."""
    csf = masks.csf_bool
    if not csf.any():
        raise EmptyMask("csf mask is empty")
    median = float(np.median(vol.data[csf].astype(np.float64)))
    if abs(median) <= 1e-9:
        raise ZeroMedian(f"csf median {median:g} is too close to zero")
    return vol.with_data(vol.data.astype(np.float64) / median)


def difference_map(t1: Volume3D, flair: Volume3D, masks: BrainMasks) -> Volume3D:
    """CSF-normalized T1w minus CSF-normalized FLAIR, zero outside the brain."""
    check_same_grid(t1, flair)
    check_same_grid(t1, masks.brain)
    t1n = csf_normalize(t1, masks).data.astype(np.float64)
    fln = csf_normalize(flair, masks).data.astype(np.float64)
    diff = np.where(masks.brain_bool, t1n - fln, 0.0)
    return t1.with_data(diff)


@dataclass(frozen=True)
class PreprocessedScan:
    """Network-ready channels of one subject on a common grid."""

    t1: Volume3D
    flair: Volume3D
    diff: Volume3D
    masks: BrainMasks
    t1_field: Volume3D | None = None
    flair_field: Volume3D | None = None


def preprocess_scan(t1: Volume3D, flair: Volume3D, masks: BrainMasks, bias_order: int = 1) -> PreprocessedScan:
    """Bias-correct both modalities, build the difference map, z-score the images.

    Inputs are assumed already on a common RAS grid (see ``volio``).
    """
    check_same_grid(t1, flair, masks.brain)
    brain = masks.brain_bool
    t1c, t1_field = bias_field_correct(t1, brain, bias_order)
    flc, fl_field = bias_field_correct(flair, brain, bias_order)
    diff = difference_map(t1c, flc, masks)
    return PreprocessedScan(
        t1=normalize_scanwise(t1c, brain),
        flair=normalize_scanwise(flc, brain),
        diff=diff,
        masks=masks,
        t1_field=t1_field,
        flair_field=fl_field,
    )
