"""Patch augmentation: axis flips, right-angle rotations, contrast changes."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from ..errors import ShapeMismatch

AXIS_PAIRS = tuple(combinations(range(3), 2))
GAIN_RANGE = (0.9, 1.1)
OFFSET_RANGE = (-0.1, 0.1)


@dataclass(frozen=True)
class AugmentParams:
    flips: tuple[bool, bool, bool]
    rot_axes: tuple[int, int]
    rot_k: int
    gains: tuple[float, ...]
    offsets: tuple[float, ...]

    @classmethod
    def identity(cls, n_image_channels: int) -> "AugmentParams":
        return cls((False, False, False), (0, 1), 0, (1.0,) * n_image_channels, (0.0,) * n_image_channels)


def sample_augment(rng: np.random.Generator, n_image_channels: int, spatial_shape) -> AugmentParams:
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    axes = AXIS_PAIRS[int(rng.integers(len(AXIS_PAIRS)))]
    k = int(rng.integers(4))
    if spatial_shape[axes[0]] != spatial_shape[axes[1]]:
        # quarter turns would change the patch shape
        k -= k % 2
    gains = tuple(float(g) for g in rng.uniform(*GAIN_RANGE, size=n_image_channels))
    offsets = tuple(float(o) for o in rng.uniform(*OFFSET_RANGE, size=n_image_channels))
    return AugmentParams(flips, axes, k, gains, offsets)


def _geometric(arr: np.ndarray, p: AugmentParams) -> np.ndarray:
    lead = arr.ndim - 3
    for axis, flip in enumerate(p.flips):
        if flip:
            arr = np.flip(arr, axis=lead + axis)
    if p.rot_k:
        arr = np.rot90(arr, k=p.rot_k, axes=(lead + p.rot_axes[0], lead + p.rot_axes[1]))
    return np.ascontiguousarray(arr)


def apply_augment(p: AugmentParams, channels: np.ndarray, labels: np.ndarray, image_channels=None):
    """Apply ``p`` to (C, X, Y, Z) channels and matching labels.

    Labels are (X, Y, Z) or (L, X, Y, Z) and receive only the geometric part.
    """
    if channels.shape[-3:] != labels.shape[-3:]:
        raise ShapeMismatch(f"channels {channels.shape} and labels {labels.shape} differ spatially")
    if image_channels is None:
        image_channels = range(channels.shape[0])
    image_channels = list(image_channels)
    out = channels.copy()
    for i, c in enumerate(image_channels):
        out[c] = p.gains[i] * out[c] + p.offsets[i]
    return _geometric(out, p), _geometric(labels, p)


def augment(channels: np.ndarray, labels: np.ndarray, rng: np.random.Generator, image_channels=None):
    n_img = channels.shape[0] if image_channels is None else len(list(image_channels))
    p = sample_augment(rng, n_img, channels.shape[-3:])
    return apply_augment(p, channels, labels, image_channels)
