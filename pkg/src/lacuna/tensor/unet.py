"""3D U-Net with an optional three-way burden classifier head."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from . import autodiff as ad
from .autodiff import Tensor

HEADS = ("dense", "dense_plus_classifier")
# "gap": bottleneck average only; "gap_load": plus the (gradient-stopped) log lesion load of the dense map
CLASSIFIER_FEATURES = ("gap", "gap_load")


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 3
    out_channels: int = 1
    head: str = "dense"
    n_classes: int = 3
    classifier_features: str = "gap"
    load_delta: float = 1e-4
    # add logit(input channel 0) to the dense head: the network predicts a correction to that map
    residual_logit: bool = False
    residual_eps: float = 1e-4

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"U-Net depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.classifier_features not in CLASSIFIER_FEATURES:
            raise ConfigError(f"classifier_features must be one of {CLASSIFIER_FEATURES}, "
                              f"got {self.classifier_features!r}")
        if self.load_delta <= 0:
            raise ConfigError("load_delta must be positive")
        if not 0 < self.residual_eps < 0.5:
            raise ConfigError("residual_eps must lie in (0, 0.5)")

    @property
    def has_classifier(self) -> bool:
        return self.head == "dense_plus_classifier"

    @property
    def classifier_inputs(self) -> int:
        return self.channels(self.depth - 1) + (self.classifier_features == "gap_load")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown unet config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class UNetOutput(NamedTuple):
    dense: Tensor
    class_logits: Tensor | None
    features: Tensor | None = None


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes."""
    shapes = {}
    prev = cfg.in_channels
    for level in range(cfg.depth):
        c = cfg.channels(level)
        shapes[f"enc{level}.conv1.w"] = (c, prev, 3, 3, 3)
        shapes[f"enc{level}.conv1.b"] = (c,)
        shapes[f"enc{level}.conv2.w"] = (c, c, 3, 3, 3)
        shapes[f"enc{level}.conv2.b"] = (c,)
        prev = c
    for level in range(cfg.depth - 2, -1, -1):
        c = cfg.channels(level)
        shapes[f"dec{level}.conv1.w"] = (c, cfg.channels(level + 1) + c, 3, 3, 3)
        shapes[f"dec{level}.conv1.b"] = (c,)
        shapes[f"dec{level}.conv2.w"] = (c, c, 3, 3, 3)
        shapes[f"dec{level}.conv2.b"] = (c,)
    shapes["head.w"] = (cfg.out_channels, cfg.base_channels)
    shapes["head.b"] = (cfg.out_channels,)
    if cfg.has_classifier:
        shapes["cls.w"] = (cfg.n_classes, cfg.classifier_inputs)
        shapes["cls.b"] = (cfg.n_classes,)
    return shapes


def init_unet(cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases; a residual head starts at zero (identity refinement)."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or (cfg.residual_logit and name == "head.w"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ad.parameter(v, name=k) for k, v in params.items()}


def _block(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    x = ad.relu(ad.conv3(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
    return ad.relu(ad.conv3(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"]))


def unet_forward(cfg: UNetConfig, params: dict[str, Tensor], x: Tensor) -> UNetOutput:
    """Dense sigmoid map of shape (out_channels, X, Y, Z) plus optional logits."""
    if x.values.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeMismatch(f"expected ({cfg.in_channels}, X, Y, Z) input, got {x.shape}")
    if any(n % cfg.divisor for n in x.shape[1:]):
        raise ShapeMismatch(f"spatial dims {x.shape[1:]} must be divisible by {cfg.divisor}")
    skips = []
    h = x
    for level in range(cfg.depth):
        h = _block(h, params, f"enc{level}")
        if level < cfg.depth - 1:
            skips.append(h)
            h = ad.maxpool2(h)
    bottleneck = h
    for level in range(cfg.depth - 2, -1, -1):
        h = ad.concat(ad.upsample2(h), skips[level])
        h = _block(h, params, f"dec{level}")
    z = ad.conv1(h, params["head.w"], params["head.b"])
    if cfg.residual_logit:
        z = ad.add_offset(z, ad.logit_values(x.values[:1], cfg.residual_eps))
    dense = ad.sigmoid(z)
    logits = feats = None
    if cfg.has_classifier:
        feats = ad.global_avg_pool(bottleneck)
        if cfg.classifier_features == "gap_load":
            # read-only: the burden loss must not reshape the dense map through this feature
            feats = ad.concat(feats, ad.constant(ad.log_load(dense, cfg.load_delta).values))
        logits = ad.linear(feats, params["cls.w"], params["cls.b"])
    return UNetOutput(dense, logits, feats)
