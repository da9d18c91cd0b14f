"""Segmentation and burden losses.

All losses return scalar :class:`Tensor` nodes.  Sums run in float64 and
gradients are cast back to the prediction's dtype.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .evaluation.components import count_components
from .phantom import BurdenCategory, burden_from_count
from .tensor.autodiff import Tensor, softmax_values

SEGMENTATION_LOSSES = ("fnw_bce", "voxel_ratio_bce")


@dataclass(frozen=True)
class LossConfig:
    w_fn: float = 10.0
    lambda_burden: float = 1.0
    p_clip: float = 1e-7
    segmentation: str = "fnw_bce"

    def __post_init__(self):
        if self.w_fn < 1:
            raise ConfigError(f"w_fn must be >= 1, got {self.w_fn}")
        if self.lambda_burden < 0:
            raise ConfigError(f"lambda_burden must be >= 0, got {self.lambda_burden}")
        if not 0 < self.p_clip < 0.5:
            raise ConfigError(f"p_clip must be in (0, 0.5), got {self.p_clip}")
        if self.segmentation not in SEGMENTATION_LOSSES:
            raise ConfigError(f"segmentation loss must be one of {SEGMENTATION_LOSSES}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_bce(pred: Tensor, target, w_pos: float, p_clip: float = 1e-7) -> Tensor:
    """Mean of ``-[w_pos * y * log p + (1 - y) * log(1 - p)]`` over voxels."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and target {y.shape} differ")
    p = np.clip(pred.values.astype(np.float64), p_clip, 1.0 - p_clip)
    n = y.size
    value = -np.sum(w_pos * y * np.log(p) + (1.0 - y) * np.log1p(-p)) / n
    grad_p = ((-w_pos * y / p + (1.0 - y) / (1.0 - p)) / n)

    def backward(g):
        return ((g * grad_p).astype(pred.dtype),)

    return Tensor(np.float64(value), (pred,), backward)


def fnw_bce(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """False-negative-weighted BCE: positive-voxel log-loss scaled by ``w_fn``."""
    return weighted_bce(pred, target, cfg.w_fn, cfg.p_clip)


def voxel_ratio(target) -> float:
    """N_neg / N_pos of a binary target, 1 when there are no positives."""
    y = np.asarray(target) > 0
    n_pos = int(y.sum())
    if n_pos == 0:
        return 1.0
    return (y.size - n_pos) / n_pos


def voxel_ratio_bce(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """BCE with the positive term weighted by the sample's class-imbalance ratio."""
    return weighted_bce(pred, target, voxel_ratio(target), cfg.p_clip)


def segmentation_loss(pred: Tensor, target, cfg: LossConfig) -> Tensor:
    if cfg.segmentation == "fnw_bce":
        return fnw_bce(pred, target, cfg)
    return voxel_ratio_bce(pred, target, cfg)


def burden_ce(class_logits: Tensor, true_category: BurdenCategory | int) -> Tensor:
    """Cross-entropy of the three-way burden logits."""
    if class_logits.shape != (3,):
        raise ShapeMismatch(f"burden_ce expects 3 logits, got {class_logits.shape}")
    z = class_logits.values.astype(np.float64)
    c = int(true_category)
    m = z.max()
    value = m + np.log(np.sum(np.exp(z - m))) - z[c]
    p = softmax_values(z)
    onehot = np.zeros(3)
    onehot[c] = 1.0

    def backward(g):
        return ((g * (p - onehot)).astype(class_logits.dtype),)

    return Tensor(np.float64(value), (class_logits,), backward)


def category_from_mask(mask, connectivity: int = 26) -> BurdenCategory:
    """Burden category of a (X, Y, Z) or single-channel (1, X, Y, Z) annotation."""
    arr = np.asarray(mask)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    return burden_from_count(count_components(arr, connectivity))


def _weighted_total(a: Tensor, b: Tensor, lam: float) -> Tensor:
    return Tensor(a.values + lam * b.values, (a, b), lambda g: (g, lam * g))


def joint_loss(dense_pred: Tensor, target_mask, class_logits: Tensor,
               cfg: LossConfig = LossConfig(), connectivity: int = 26) -> Tensor:
    """Segmentation loss plus ``lambda_burden`` times the burden cross-entropy.

    The burden target is always derived from ``target_mask`` by counting its
    connected components.
    """
    seg = segmentation_loss(dense_pred, target_mask, cfg)
    if cfg.lambda_burden == 0:
        return seg
    target = np.asarray(target_mask)
    # dense predictions carry a leading channel axis
    spatial = target.reshape(target.shape[-3:]) if target.ndim > 3 else target
    category = category_from_mask(spatial, connectivity)
    return _weighted_total(seg, burden_ce(class_logits, category), cfg.lambda_burden)
