"""Preprocessed scan sets and patch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import GridMismatch, PatchTooLarge
from ..phantom import BurdenCategory, PhantomSample
from ..preproc import BrainMasks, preprocess_scan
from ..volio import Volume3D, check_same_grid

STAGE1_CHANNELS = ("t1", "flair", "diff")
STAGE2_CHANNELS = ("stage1_prob", "t1", "flair", "prior")
# channels that receive contrast augmentation
IMAGE_CHANNELS = {1: (0, 1, 2), 2: (1, 2)}
POSITIVE_JITTER = 4


@dataclass(frozen=True, eq=False)
class ScanSet:
    """One subject's network inputs on a shared grid."""

    id: str
    t1: np.ndarray
    flair: np.ndarray
    diff: np.ndarray
    brain: np.ndarray
    atlas: np.ndarray
    affine: np.ndarray
    lacune_mask: np.ndarray | None = None
    true_category: BurdenCategory | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t1.shape

    def stage1_channels(self) -> np.ndarray:
        return np.stack([self.t1, self.flair, self.diff]).astype(np.float32)

    def stage2_channels(self, stage1_prob: np.ndarray, prior_channel: np.ndarray) -> np.ndarray:
        if stage1_prob.shape != self.shape or prior_channel.shape != self.shape:
            raise GridMismatch("stage-2 inputs must share the scan grid")
        return np.stack([stage1_prob, self.t1, self.flair, prior_channel]).astype(np.float32)

    def volume(self, data) -> Volume3D:
        return Volume3D(data, self.affine)


def scanset_from_volumes(scan_id: str, t1: Volume3D, flair: Volume3D, masks: BrainMasks, atlas: Volume3D,
                         lacune_mask: Volume3D | None = None, true_category=None,
                         bias_order: int = 1) -> ScanSet:
    check_same_grid(t1, flair, masks.brain, atlas)
    pre = preprocess_scan(t1, flair, masks, bias_order)
    lac = None
    if lacune_mask is not None:
        check_same_grid(t1, lacune_mask)
        lac = (lacune_mask.data > 0).astype(np.float32)
    return ScanSet(
        id=scan_id,
        t1=np.asarray(pre.t1.data),
        flair=np.asarray(pre.flair.data),
        diff=np.asarray(pre.diff.data),
        brain=masks.brain_bool,
        atlas=np.asarray(atlas.data).astype(np.int16),
        affine=np.asarray(t1.affine),
        lacune_mask=lac,
        true_category=true_category,
    )


def scanset_from_phantom(sample: PhantomSample, scan_id: str | None = None, bias_order: int = 1) -> ScanSet:
    return scanset_from_volumes(
        scan_id or f"ph{sample.seed:020d}", sample.t1, sample.flair, sample.masks, sample.region_atlas,
        sample.lacune_mask, sample.true_category, bias_order,
    )


def _patch_start(centre: np.ndarray, size: np.ndarray, shape: np.ndarray) -> np.ndarray:
    return np.clip(centre - size // 2, 0, shape - size)


def sample_patches(scan: ScanSet, rng: np.random.Generator, n: int, patch_size, pos_fraction: float = 0.5,
                   stage: int = 1, stage1_prob: np.ndarray | None = None,
                   prior_channel: np.ndarray | None = None):
    """Draw ``n`` (channels, label) training patches.

    A share ``pos_fraction`` is centred within a few voxels of a random
    lacune voxel (when the scan has any); the rest are centred on uniform
    brain voxels.
    """
    size = np.broadcast_to(np.asarray(patch_size, dtype=int), (3,))
    shape = np.asarray(scan.shape)
    if np.any(size > shape):
        raise PatchTooLarge(f"patch {tuple(size)} does not fit volume {tuple(shape)}")
    if stage == 1:
        channels = scan.stage1_channels()
    else:
        channels = scan.stage2_channels(stage1_prob, prior_channel)
    label = scan.lacune_mask if scan.lacune_mask is not None else np.zeros(scan.shape, np.float32)

    positives = np.argwhere(label > 0)
    brain = np.argwhere(scan.brain)
    out = []
    for _ in range(n):
        if len(positives) and rng.random() < pos_fraction:
            v = positives[rng.integers(len(positives))]
            centre = v + rng.integers(-POSITIVE_JITTER, POSITIVE_JITTER + 1, size=3)
        else:
            centre = brain[rng.integers(len(brain))]
        s = _patch_start(centre, size, shape)
        sl = tuple(slice(a, a + b) for a, b in zip(s, size))
        out.append((channels[(slice(None), *sl)].copy(), label[sl].astype(np.float32)))
    return out
