"""Run configuration: one JSON document covering every pipeline knob."""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .phantom import PhantomConfig, splitmix64
from .pipeline.training import TrainRun
from .tensor.unet import UNetConfig

SEGMENTATION_VARIANTS = ("fnw_bce", "voxel_ratio_bce")


def _reject_unknown(section: str, d: dict, known) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def sub_seed(master: int, label: str) -> int:
    """Stable 63-bit seed for a named sub-task of a run."""
    _, value = splitmix64((int(master) ^ (zlib.crc32(label.encode()) << 20)) & (2**64 - 1))
    return value >> 1


@dataclass(frozen=True)
class CohortConfig:
    size: int = 60
    # explicit phantom seeds; when empty they derive from the run seed
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("cohort size must be positive")
        if self.seeds and len(self.seeds) != self.size:
            raise ConfigError(f"cohort lists {len(self.seeds)} seeds but size is {self.size}")


@dataclass(frozen=True)
class StageConfig:
    unet: UNetConfig
    train: TrainRun

    @classmethod
    def from_dict(cls, section: str, d: dict, default: "StageConfig") -> "StageConfig":
        _reject_unknown(section, d, ("unet", "train"))
        unet = UNetConfig.from_dict({**asdict(default.unet), **d.get("unet", {})})
        train = TrainRun.from_dict({**asdict(default.train), **d.get("train", {})})
        return cls(unet, train)

    def to_dict(self) -> dict:
        return {"unet": self.unet.to_dict(), "train": self.train.to_dict()}


@dataclass(frozen=True)
class PostprocessConfig:
    threshold: float = 0.5
    min_component_voxels: int = 5
    connectivity: int = 26

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ConfigError("postprocess threshold must lie in [0, 1]")
        if self.connectivity not in (6, 18, 26):
            raise ConfigError("connectivity must be 6, 18 or 26")


@dataclass(frozen=True)
class EvalConfig:
    rule: str = "any_voxel"
    iou_threshold: float = 0.1
    connectivity: int = 26

    def __post_init__(self):
        if self.rule not in ("any_voxel", "centroid_inside", "iou"):
            raise ConfigError(f"unknown detection rule {self.rule!r}")
        if self.connectivity not in (6, 18, 26):
            raise ConfigError("connectivity must be 6, 18 or 26")


@dataclass(frozen=True)
class CrossvalConfig:
    k: int = 5
    variants: tuple[str, ...] = SEGMENTATION_VARIANTS

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("crossval k must be >= 2")
        bad = [v for v in self.variants if v not in SEGMENTATION_VARIANTS]
        if bad or not self.variants or len(set(self.variants)) != len(self.variants):
            raise ConfigError(f"variants must be distinct members of {SEGMENTATION_VARIANTS}, got {self.variants}")


def _simple(cls, section: str, d: dict):
    _reject_unknown(section, d, cls.__dataclass_fields__)
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# desk defaults: 32^3 phantoms, stage 2 sees whole volumes
DESK_PHANTOM = {"dims": [32, 32, 32], "lacune_count_range": [0, 6], "lacune_diameter_range_mm": [3.0, 7.0]}
DEFAULT_STAGE1 = StageConfig(UNetConfig(base_channels=8),
                             TrainRun(patch_size=16, patches_per_epoch=50, epochs=8, lr=1e-3))
DEFAULT_STAGE2 = StageConfig(UNetConfig(base_channels=4, classifier_features="gap_load", residual_logit=True),
                             TrainRun(patch_size=32, patches_per_epoch=60, epochs=8, lr=2e-3))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig.from_dict(DESK_PHANTOM))
    cohort: CohortConfig = field(default_factory=CohortConfig)
    stage1: StageConfig = DEFAULT_STAGE1
    stage2: StageConfig = DEFAULT_STAGE2
    loss: LossConfig = field(default_factory=LossConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    crossval: CrossvalConfig = field(default_factory=CrossvalConfig)
    bias_order: int = 1
    paths: dict = field(default_factory=dict)

    SECTIONS = ("seed", "phantom", "cohort", "stage1", "stage2", "loss", "postprocess", "eval",
                "crossval", "bias_order", "paths")
    PATH_KEYS = ("t1", "flair", "masks", "atlas", "lacune_mask", "phantom_dir", "checkpoint_dir", "scans_dir")

    def __post_init__(self):
        if not 1 <= self.bias_order <= 4:
            raise ConfigError("bias_order must be within 1..4")
        _reject_unknown("paths", self.paths, self.PATH_KEYS)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown("config", d, cls.SECTIONS)
        try:
            seed = int(d.get("seed", 0))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"seed must be an integer: {e}") from e
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        try:
            return cls(
                seed=seed,
                phantom=PhantomConfig.from_dict({**DESK_PHANTOM, **d.get("phantom", {})}),
                cohort=_simple(CohortConfig, "cohort", d.get("cohort", {})),
                stage1=StageConfig.from_dict("stage1", d.get("stage1", {}), DEFAULT_STAGE1),
                stage2=StageConfig.from_dict("stage2", d.get("stage2", {}), DEFAULT_STAGE2),
                loss=LossConfig.from_dict(d.get("loss", {})),
                postprocess=_simple(PostprocessConfig, "postprocess", d.get("postprocess", {})),
                eval=_simple(EvalConfig, "eval", d.get("eval", {})),
                crossval=_simple(CrossvalConfig, "crossval", d.get("crossval", {})),
                bias_order=int(d.get("bias_order", 1)),
                paths=dict(d.get("paths", {})),
            )
        except TypeError as e:
            raise ConfigError(f"malformed config value: {e}") from e

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "cohort": {"size": self.cohort.size, "seeds": list(self.cohort.seeds)},
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "loss": self.loss.to_dict(),
            "postprocess": asdict(self.postprocess),
            "eval": asdict(self.eval),
            "crossval": {"k": self.crossval.k, "variants": list(self.crossval.variants)},
            "bias_order": self.bias_order,
            "paths": dict(self.paths),
        }

    def with_overrides(self, seed: int | None = None) -> "RunConfig":
        return self if seed is None else replace(self, seed=int(seed))

    def train_run(self, stage: int, tag: str) -> TrainRun:
        """Stage training settings with the RNG seed derived from the run seed and ``tag``."""
        run = (self.stage1 if stage == 1 else self.stage2).train
        return replace(run, seed=sub_seed(self.seed, f"{tag}/stage{stage}/{run.seed}"))

    def loss_for(self, variant: str) -> LossConfig:
        return replace(self.loss, segmentation=variant)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(d: dict) -> str:
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file; a run manifest is accepted and its effective config reused."""
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if isinstance(d, dict) and "effective_config" in d and "config_hash" in d:
        d = d["effective_config"]
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(d)
