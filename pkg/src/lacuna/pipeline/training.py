"""Training loops for the detection (stage 1) and refinement/burden (stage 2) networks."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import ConfigError, DivergedLoss, DataError
from ..losses import LossConfig, category_from_mask, joint_loss, segmentation_loss
from ..tensor import autodiff as ad
from ..tensor.augment import augment
from ..tensor.checkpoint import Checkpoint
from ..tensor.optim import AdamState, adam_step
from ..tensor.unet import UNetConfig, as_tensors, init_unet, unet_forward
from .prior import LocationPrior, build_location_prior
from .scans import IMAGE_CHANNELS, STAGE1_CHANNELS, STAGE2_CHANNELS, ScanSet, sample_patches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainRun:
    seed: int = 0
    patch_size: int = 32
    patches_per_epoch: int = 64
    epochs: int = 10
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pos_fraction: float = 0.5
    augment: bool = True
    # inference window edge; None uses patch_size
    infer_window: int | None = None
    # stage 2: full-batch refit of the burden head on frozen features (0 disables)
    refit_steps: int = 500
    refit_lr: float = 0.05
    refit_l2: float = 1e-3

    def __post_init__(self):
        if self.patch_size < 1 or self.epochs < 0 or self.patches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("patch_size, patches_per_epoch and batch_size must be positive, epochs >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0 <= self.pos_fraction <= 1:
            raise ConfigError("pos_fraction must lie in [0, 1]")
        if self.refit_steps < 0 or self.refit_lr < 0 or self.refit_l2 < 0:
            raise ConfigError("refit_steps, refit_lr and refit_l2 must be non-negative")

    @property
    def window(self) -> int:
        return self.infer_window or self.patch_size

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRun":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageModel:
    stage: int
    unet: UNetConfig
    params: dict[str, np.ndarray]
    window: int
    history: list[float] = field(default_factory=list)
    prior: LocationPrior | None = None
    step: int = 0

    def to_checkpoint(self) -> Checkpoint:
        meta = {"stage": self.stage, "unet": self.unet.to_dict(), "window": self.window,
                "history": self.history}
        if self.prior is not None:
            meta["prior"] = self.prior.to_dict()
        return Checkpoint({k: v for k, v in self.params.items()}, self.step, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "StageModel":
        meta = ckpt.meta
        try:
            prior = LocationPrior.from_dict(meta["prior"]) if "prior" in meta else None
            return cls(int(meta["stage"]), UNetConfig.from_dict(meta["unet"]), ckpt.params,
                       int(meta["window"]), list(meta.get("history", [])), prior, ckpt.step)
        except KeyError as e:
            raise DataError(f"checkpoint metadata is missing {e}") from e


def stage_unet(base: UNetConfig, stage: int) -> UNetConfig:
    if stage == 1:
        return replace(base, in_channels=len(STAGE1_CHANNELS), out_channels=1, head="dense")
    return replace(base, in_channels=len(STAGE2_CHANNELS), out_channels=1, head="dense_plus_classifier")


def _check_divisible(size: int, unet: UNetConfig, what: str):
    if size % unet.divisor:
        raise ConfigError(f"{what} {size} must be divisible by 2^(depth-1) = {unet.divisor}")


def train_stage(stage: int, cohort: list[ScanSet], run: TrainRun, unet: UNetConfig, loss: LossConfig,
                stage1: StageModel | None = None, prior: LocationPrior | None = None,
                progress=None) -> StageModel:
    """Fit one stage with Adam on augmented patches; deterministic for ``run.seed``.

    Stage 1 minimizes the configured segmentation loss; stage 2 minimizes
    the joint segmentation + burden loss on [stage-1 map, T1w, FLAIR, prior].
    """
    from .inference import infer_stage  # cyclic at import time

    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    if not cohort:
        raise DataError("training cohort is empty")
    cfg = stage_unet(unet, stage)
    _check_divisible(run.patch_size, cfg, "patch_size")
    _check_divisible(run.window, cfg, "infer_window")

    stage1_maps, prior_maps = {}, {}
    if stage == 2:
        if stage1 is None:
            raise ConfigError("stage 2 training needs a stage-1 model")
        if prior is None:
            prior = build_location_prior(cohort[0].atlas, [s.lacune_mask for s in cohort if s.lacune_mask is not None])
        for scan in cohort:
            stage1_maps[scan.id] = infer_stage(stage1, scan.stage1_channels())[0]
            prior_maps[scan.id] = prior.render(scan.atlas)

    rng = np.random.default_rng(run.seed)
    params = init_unet(cfg, rng)
    state = AdamState()
    history = []
    image_channels = IMAGE_CHANNELS[stage]
    for epoch in range(run.epochs):
        epoch_losses = []
        for _ in range(run.patches_per_epoch // run.batch_size or 1):
            grads = None
            batch_loss = 0.0
            for _ in range(run.batch_size):
                scan = cohort[int(rng.integers(len(cohort)))]
                (channels, label), = sample_patches(
                    scan, rng, 1, run.patch_size, run.pos_fraction, stage,
                    stage1_maps.get(scan.id), prior_maps.get(scan.id))
                if run.augment:
                    channels, label = augment(channels, label, rng, image_channels)
                tensors = as_tensors(params)
                out = unet_forward(cfg, tensors, ad.constant(channels))
                target = label[None]
                if stage == 1:
                    value = segmentation_loss(out.dense, target, loss)
                else:
                    value = joint_loss(out.dense, target, out.class_logits, loss)
                if not np.isfinite(value.item()):
                    raise DivergedLoss(f"stage {stage} loss became {value.item()} at epoch {epoch}")
                value.backward()
                batch_loss += value.item()
                if grads is None:
                    grads = {k: t.grad.copy() for k, t in tensors.items()}
                else:
                    for k in grads:
                        grads[k] += tensors[k].grad
            if run.batch_size > 1:
                for g in grads.values():
                    g /= run.batch_size
            adam_step(params, grads, state, run.lr, run.beta1, run.beta2, run.eps)
            epoch_losses.append(batch_loss / run.batch_size)
        history.append(float(np.mean(epoch_losses)))
        log.info("stage %d epoch %d loss %.5f", stage, epoch, history[-1])
        if progress is not None:
            progress(stage, epoch, history[-1])
    model = StageModel(stage, cfg, params, run.window, history, prior if stage == 2 else None, state.step)
    if stage == 2 and run.refit_steps:
        refit_classifier(model, cohort, stage1_maps, prior_maps, run)
    return model


def refit_classifier(model: StageModel, cohort: list[ScanSet], stage1_maps: dict, prior_maps: dict,
                     run: TrainRun) -> None:
    """Refit the 3-way affine head by L2-penalized softmax regression on frozen features.

    Features come from the same windows inference uses; each window is
    labelled with its scan's annotation-derived category.
    """
    from .inference import window_features

    feats, labels = [], []
    for scan in cohort:
        f = window_features(model, scan.stage2_channels(stage1_maps[scan.id], prior_maps[scan.id]))
        feats.append(f)
        labels.extend([int(category_from_mask(scan.lacune_mask.data))] * len(f))
    x = np.concatenate(feats)
    onehot = np.eye(model.unet.n_classes)[labels]
    head = {"cls.w": model.params["cls.w"].astype(np.float64), "cls.b": model.params["cls.b"].astype(np.float64)}
    state = AdamState()
    for _ in range(run.refit_steps):
        z = x @ head["cls.w"].T + head["cls.b"]
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - onehot) / len(x)
        grads = {"cls.w": d.T @ x + 2 * run.refit_l2 * head["cls.w"], "cls.b": d.sum(axis=0)}
        adam_step(head, grads, state, run.refit_lr, run.beta1, run.beta2, run.eps)
    for k, v in head.items():
        model.params[k] = v.astype(model.params[k].dtype)
