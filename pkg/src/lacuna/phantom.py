"""Synthetic T1w/FLAIR phantoms with ground-truth lacunes, mimics and an atlas."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, PlacementFailure
from .preproc import BrainMasks
from .volio import Volume3D

MAX_ATTEMPTS = 1000
SIZE_CRITERION_MM = 3.0


class BurdenCategory(enum.IntEnum):
    """Categorical lacune burden: '0', '1-3' or '>3' lacunes."""

    C0 = 0
    C1 = 1
    C2 = 2

    @property
    def label(self) -> str:
        return ("0", "1-3", ">3")[self]


CATEGORY_COUNTS = {BurdenCategory.C0: (0, 0), BurdenCategory.C1: (1, 3), BurdenCategory.C2: (4, 10**9)}


def burden_from_count(k: int) -> BurdenCategory:
    if k < 0:
        raise ValueError(f"lacune count must be non-negative, got {k}")
    if k == 0:
        return BurdenCategory.C0
    if k <= 3:
        return BurdenCategory.C1
    return BurdenCategory.C2


# Tissue labels
BACKGROUND, CSF, GM, WM = 0, 1, 2, 3

# (T1w, FLAIR) mean intensities before bias and noise.  Lacunes and mimics
# match CSF on T1w; on FLAIR their fluid signal is only partly suppressed.
INTENSITIES = {
    CSF: (0.20, 0.10),
    GM: (0.50, 0.30),
    WM: (0.80, 0.38),
    "lesion": (0.20, 0.25),
}


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 1.0
    lacune_count_range: tuple[int, int] = (0, 8)
    lacune_diameter_range_mm: tuple[float, float] = (3.0, 10.0)
    mimic_count_range: tuple[int, int] = (0, 6)
    mimic_diameter_range_mm: tuple[float, float] = (1.0, 2.5)
    noise_sigma: float = 0.05
    bias_amplitude: float = 0.3
    # sampling distribution over burden categories (C0, C1, C2)
    category_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    prior_high_regions: tuple[int, ...] = (1, 2)
    prior_high_prob: float = 0.8
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lacune_count_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad lacune_count_range {self.lacune_count_range}")
        mlo, mhi = self.mimic_count_range
        if not 0 <= mlo <= mhi:
            raise ConfigError(f"bad mimic_count_range {self.mimic_count_range}")
        dlo, dhi = self.lacune_diameter_range_mm
        if not SIZE_CRITERION_MM <= dlo <= dhi:
            raise ConfigError(f"lacune diameters must be >= {SIZE_CRITERION_MM} mm, got {self.lacune_diameter_range_mm}")
        nlo, nhi = self.mimic_diameter_range_mm
        if not 0 < nlo <= nhi < SIZE_CRITERION_MM:
            raise ConfigError(f"mimic diameters must be < {SIZE_CRITERION_MM} mm, got {self.mimic_diameter_range_mm}")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigError(f"dims must be three values >= 8, got {self.dims}")
        if len(self.category_probs) != 3 or min(self.category_probs) < 0 or sum(self.category_probs) <= 0:
            raise ConfigError(f"bad category_probs {self.category_probs}")
        if not 0 <= self.prior_high_prob <= 1:
            raise ConfigError("prior_high_prob must be within [0, 1]")
        if any(not 1 <= r <= 8 for r in self.prior_high_regions) or not self.prior_high_regions:
            raise ConfigError(f"prior_high_regions must be octant labels 1..8, got {self.prior_high_regions}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True, eq=False)
class PhantomSample:
    t1: Volume3D
    flair: Volume3D
    lacune_mask: Volume3D
    region_atlas: Volume3D
    masks: BrainMasks
    true_count: int
    true_category: BurdenCategory
    seed: int
    mimic_mask: Volume3D | None = None
    tissue: Volume3D | None = None
    lacune_centres: tuple = field(default=())


# Seeds ---------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-sample seeds from a master seed via splitmix64."""
    state = master_seed & _MASK64
    out = []
    for _ in range(n):
        state, value = splitmix64(state)
        out.append(value)
    return out


# Geometry ------------------------------------------------------------------

@dataclass
class _Anatomy:
    tissue: np.ndarray
    atlas: np.ndarray
    brain: np.ndarray
    coords: np.ndarray  # (3, nx, ny, nz) normalized to [-1, 1] over the grid


def _anatomy(cfg: PhantomConfig) -> _Anatomy:
    dims = np.asarray(cfg.dims)
    s = cfg.spacing_mm
    centre = (dims - 1) / 2.0
    idx = np.indices(cfg.dims, dtype=np.float64)
    rel = (idx - centre[:, None, None, None]) * s  # mm from centre
    extent = dims * s
    semi = np.array([0.45, 0.45, 0.40]) * extent
    r = np.sqrt(sum((rel[a] / semi[a]) ** 2 for a in range(3)))

    tissue = np.zeros(cfg.dims, dtype=np.int8)
    tissue[r <= 1.0] = CSF
    tissue[r <= 0.9] = GM
    tissue[r <= 0.75] = WM
    for side in (-1, 1):
        vc = np.array([side * 0.12, 0.0, 0.1]) * semi
        vs = np.array([0.07, 0.25, 0.12]) * semi
        vr = np.sqrt(sum(((rel[a] - vc[a]) / vs[a]) ** 2 for a in range(3)))
        tissue[(vr <= 1.0) & (tissue == WM)] = CSF

    brain = tissue > 0
    octant = 1 + (rel[0] >= 0) + 2 * (rel[1] >= 0) + 4 * (rel[2] >= 0)
    atlas = np.where(brain, octant, 0).astype(np.int16)
    coords = (idx - centre[:, None, None, None]) / np.maximum(centre, 0.5)[:, None, None, None]
    return _Anatomy(tissue, atlas, brain, coords)


def _ball_offsets(semi_vox: np.ndarray) -> np.ndarray:
    """Integer offsets inside an axis-aligned ellipsoid centred on a voxel."""
    reach = np.ceil(semi_vox).astype(int)
    grids = np.meshgrid(*[np.arange(-k, k + 1) for k in reach], indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    inside = np.sum((offs / semi_vox) ** 2, axis=1) <= 1.0
    return offs[inside]


def equivalent_diameter(n_voxels: int, voxel_volume: float = 1.0) -> float:
    return (6.0 * n_voxels * voxel_volume / math.pi) ** (1.0 / 3.0)


def _try_place(rng, candidates, diam_range, spacing, allowed, occupied, spheroid):
    """Sample one blob; return its voxel indices or None when the draw is rejected."""
    d = rng.uniform(*diam_range)
    aspect = rng.uniform(0.85, 1.15) if spheroid else 1.0
    semi = np.array([d / 2, d / 2, d / 2 * aspect]) / spacing
    if spheroid:
        semi = semi[rng.permutation(3)]
    centre = candidates[rng.integers(len(candidates))]
    vox = centre + _ball_offsets(semi)
    shape = np.array(allowed.shape)
    if np.any(vox < 1) or np.any(vox >= shape - 1):
        return None
    eq = equivalent_diameter(len(vox), spacing**3)
    if not diam_range[0] <= eq <= diam_range[1] and not (
        # mimics only need to stay below the size criterion
        diam_range[1] < SIZE_CRITERION_MM and eq < SIZE_CRITERION_MM
    ):
        return None
    ix = tuple(vox.T)
    if not allowed[ix].all() or occupied[ix].any():
        return None
    return vox


def _mark_occupied(occupied, vox):
    # one-voxel margin keeps blobs apart under 26-connectivity
    for off in np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), -1).reshape(-1, 3):
        occupied[tuple((vox + off).T)] = True


def _sample_count(rng, cfg: PhantomConfig) -> int:
    lo, hi = cfg.lacune_count_range
    eligible = []
    for cat, (clo, chi) in CATEGORY_COUNTS.items():
        a, b = max(lo, clo), min(hi, chi)
        if a <= b and cfg.category_probs[cat] > 0:
            eligible.append((cat, a, b))
    if not eligible:
        # the configured range excludes every weighted category
        return int(rng.integers(lo, hi + 1))
    p = np.array([cfg.category_probs[c] for c, _, _ in eligible], dtype=np.float64)
    choice = rng.choice(len(eligible), p=p / p.sum())
    _, a, b = eligible[choice]
    return int(rng.integers(a, b + 1))


def generate_phantom(cfg: PhantomConfig) -> PhantomSample:
    """Deterministically synthesize one subject from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    anat = _anatomy(cfg)
    spacing = cfg.spacing_mm
    wm = anat.tissue == WM
    occupied = np.zeros(cfg.dims, dtype=bool)
    lesion = np.zeros(cfg.dims, dtype=bool)
    lacunes = np.zeros(cfg.dims, dtype=bool)

    regions = [r for r in range(1, 9) if np.any(wm & (anat.atlas == r))]
    high = [r for r in cfg.prior_high_regions if r in regions]
    low = [r for r in regions if r not in high]
    region_voxels = {r: np.argwhere(wm & (anat.atlas == r)) for r in regions}

    count = _sample_count(rng, cfg)
    centres = []
    for n in range(count):
        if high and (not low or rng.random() < cfg.prior_high_prob):
            region = high[rng.integers(len(high))]
        else:
            region = low[rng.integers(len(low))]
        for _ in range(MAX_ATTEMPTS):
            vox = _try_place(rng, region_voxels[region], cfg.lacune_diameter_range_mm, spacing, wm, occupied, True)
            if vox is not None:
                break
        else:
            raise PlacementFailure(f"could not place lacune {n + 1} of {count} (seed {cfg.seed})")
        lacunes[tuple(vox.T)] = True
        _mark_occupied(occupied, vox)
        centres.append(tuple(int(v) for v in np.round(vox.mean(axis=0))))

    mimics = np.zeros(cfg.dims, dtype=bool)
    all_wm = np.argwhere(wm)
    n_mimics = int(rng.integers(cfg.mimic_count_range[0], cfg.mimic_count_range[1] + 1))
    for n in range(n_mimics):
        for _ in range(MAX_ATTEMPTS):
            vox = _try_place(rng, all_wm, cfg.mimic_diameter_range_mm, spacing, wm, occupied, False)
            if vox is not None:
                break
        else:
            raise PlacementFailure(f"could not place mimic {n + 1} of {n_mimics} (seed {cfg.seed})")
        mimics[tuple(vox.T)] = True
        _mark_occupied(occupied, vox)
    lesion = lacunes | mimics

    images = []
    for modality in (0, 1):
        img = np.zeros(cfg.dims, dtype=np.float64)
        for label in (CSF, GM, WM):
            img[anat.tissue == label] = INTENSITIES[label][modality]
        img[lesion] = INTENSITIES["lesion"][modality]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        bias = np.exp(cfg.bias_amplitude * np.tensordot(direction, anat.coords, axes=1))
        contrast = INTENSITIES[WM][modality] - INTENSITIES[CSF][modality]
        noise = rng.normal(0.0, cfg.noise_sigma * contrast, size=cfg.dims)
        img = np.where(anat.brain, img * bias + noise, 0.0)
        floor = 0.05 * INTENSITIES[CSF][modality]
        img[anat.brain] = np.maximum(img[anat.brain], floor)
        images.append(img)

    affine = np.diag([spacing, spacing, spacing, 1.0])
    vol = lambda a: Volume3D(a, affine)  # noqa: E731
    csf = anat.tissue == CSF
    return PhantomSample(
        t1=vol(images[0]),
        flair=vol(images[1]),
        lacune_mask=vol(lacunes),
        region_atlas=vol(anat.atlas),
        masks=BrainMasks(brain=vol(anat.brain), csf=vol(csf)),
        true_count=count,
        true_category=burden_from_count(count),
        seed=cfg.seed,
        mimic_mask=vol(mimics),
        tissue=vol(anat.tissue),
        lacune_centres=tuple(centres),
    )


def generate_cohort(cfg: PhantomConfig, seeds) -> list[PhantomSample]:
    return [generate_phantom(replace(cfg, seed=int(s))) for s in seeds]
