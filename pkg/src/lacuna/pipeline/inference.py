"""Sliding-window inference and post-processing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, GridMismatch
from ..evaluation.components import ComponentSet, connected_components
from ..phantom import BurdenCategory
from ..tensor import autodiff as ad
from ..tensor.autodiff import softmax_values
from ..tensor.unet import unet_forward
from ..volio import Volume3D
from .scans import ScanSet
from .training import StageModel


def _window_starts(n: int, window: int) -> list[int]:
    stride = max(window // 2, 1)
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def _padded(model: StageModel, channels: np.ndarray):
    if channels.ndim != 4 or channels.shape[0] != model.unet.in_channels:
        raise GridMismatch(f"expected ({model.unet.in_channels}, X, Y, Z) channels, got {channels.shape}")
    w = model.window
    shape = np.asarray(channels.shape[1:])
    padded = np.maximum(shape, w)
    before = (padded - shape) // 2
    x = np.zeros((channels.shape[0], *padded), dtype=np.float32)
    x[(slice(None), *[slice(b, b + n) for b, n in zip(before, shape)])] = channels
    crop = tuple(slice(b, b + n) for b, n in zip(before, shape))
    return x, crop


def _windows(model: StageModel, x: np.ndarray):
    w = model.window
    params = {k: ad.constant(v) for k, v in model.params.items()}
    for i in _window_starts(x.shape[1], w):
        for j in _window_starts(x.shape[2], w):
            for k in _window_starts(x.shape[3], w):
                sl = (slice(i, i + w), slice(j, j + w), slice(k, k + w))
                yield sl, unet_forward(model.unet, params, ad.constant(x[(slice(None), *sl)]))


def infer_stage(model: StageModel, channels: np.ndarray):
    """Dense probability map (X, Y, Z) and mean window class probabilities.

    Windows of edge ``model.window`` move with stride window/2 and their
    probabilities are averaged with uniform weights.  Axes shorter than one
    window are zero-padded symmetrically and cropped back.
    """
    x, crop = _padded(model, channels)
    total = np.zeros(x.shape[1:], dtype=np.float64)
    hits = np.zeros(x.shape[1:], dtype=np.float64)
    class_probs = []
    for sl, out in _windows(model, x):
        total[sl] += out.dense.values[0]
        hits[sl] += 1.0
        if out.class_logits is not None:
            class_probs.append(softmax_values(out.class_logits.values.astype(np.float64)))
    prob = (total / hits)[crop]
    mean_probs = np.mean(class_probs, axis=0) if class_probs else None
    return prob.astype(np.float32), mean_probs


def window_features(model: StageModel, channels: np.ndarray) -> np.ndarray:
    """Classifier-head inputs of every inference window, shape (windows, features)."""
    x, _ = _padded(model, channels)
    return np.stack([out.features.values.astype(np.float64) for _, out in _windows(model, x)])


def burden_from_probs(probs) -> BurdenCategory:
    """Argmax; ties go to the lower category."""
    return BurdenCategory(int(np.argmax(np.asarray(probs))))


@dataclass(frozen=True, eq=False)
class InferenceResult:
    prob: Volume3D
    stage1_prob: Volume3D
    burden: BurdenCategory
    class_probs: np.ndarray


def infer_volume(stage1: StageModel, stage2: StageModel, scan: ScanSet) -> InferenceResult:
    """Run both stages on one preprocessed scan."""
    if stage2.prior is None:
        raise DataError("stage-2 model carries no location prior")
    p1, _ = infer_stage(stage1, scan.stage1_channels())
    prior = stage2.prior.render(scan.atlas)
    p2, probs = infer_stage(stage2, scan.stage2_channels(p1, prior))
    return InferenceResult(scan.volume(p2), scan.volume(p1), burden_from_probs(probs), probs)


def postprocess(prob, threshold: float = 0.5, min_component_voxels: int = 5,
                connectivity: int = 26) -> tuple[np.ndarray, ComponentSet]:
    """Threshold, label components and drop those below ``min_component_voxels``."""
    if isinstance(prob, Volume3D):
        arr, affine = prob.data, prob.affine
    else:
        arr, affine = np.asarray(prob), np.eye(4)
    raw = connected_components(arr >= threshold, connectivity)
    keep = np.zeros(arr.shape, dtype=bool)
    for comp in raw.components:
        if comp.voxel_count >= min_component_voxels:
            keep[tuple(comp.voxels.T)] = True
    comps = connected_components(Volume3D(keep, affine) if isinstance(prob, Volume3D) else keep, connectivity)
    return keep, comps
