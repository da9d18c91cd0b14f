import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lacuna.errors import ConfigError, PlacementFailure
from lacuna.evaluation import connected_components
from lacuna.phantom import (
    BurdenCategory,
    PhantomConfig,
    burden_from_count,
    derive_seeds,
    equivalent_diameter,
    generate_cohort,
    generate_phantom,
    splitmix64,
)
from lacuna.phantom import WM as TISSUE_WM

SMALL = PhantomConfig(dims=(32, 32, 32), lacune_count_range=(0, 6), lacune_diameter_range_mm=(3, 7))


@pytest.mark.parametrize("k,expected", [(0, BurdenCategory.C0), (1, BurdenCategory.C1), (3, BurdenCategory.C1),
                                        (4, BurdenCategory.C2), (17, BurdenCategory.C2)])
def test_burden_from_count(k, expected):
    assert burden_from_count(k) is expected


def test_category_labels():
    assert [c.label for c in BurdenCategory] == ["0", "1-3", ">3"]


def test_splitmix_reference_values():
    # first outputs of the reference splitmix64 stream seeded with 0
    state, a = splitmix64(0)
    _, b = splitmix64(state)
    assert a == 0xE220A8397B1DCDAF
    assert b == 0x6E789E6AA1B965F4
    assert derive_seeds(0, 2) == [a, b]


def test_zero_lacunes():
    s = generate_phantom(PhantomConfig(dims=(32, 32, 32), lacune_count_range=(0, 0)))
    assert not s.lacune_mask.data.any()
    assert s.true_count == 0 and s.true_category is BurdenCategory.C0


def test_deterministic():
    a = generate_phantom(PhantomConfig(dims=(32, 32, 32), seed=42))
    b = generate_phantom(PhantomConfig(dims=(32, 32, 32), seed=42))
    for name in ("t1", "flair", "lacune_mask", "region_atlas", "mimic_mask"):
        assert getattr(a, name).data.tobytes() == getattr(b, name).data.tobytes()
    c = generate_phantom(PhantomConfig(dims=(32, 32, 32), seed=43))
    assert a.t1.data.tobytes() != c.t1.data.tobytes()


def test_fixed_count_five():
    s = generate_phantom(PhantomConfig(lacune_count_range=(5, 5), seed=5))
    comps = connected_components(s.lacune_mask)
    assert len(comps) == 5 == s.true_count
    for c in comps.components:
        assert 3.0 <= equivalent_diameter(c.voxel_count) <= 10.0
    assert s.true_category is BurdenCategory.C2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_size_criterion_separates_populations(seed):
    s = generate_phantom(PhantomConfig(dims=(48, 48, 48), seed=seed))
    lac = connected_components(s.lacune_mask)
    mim = connected_components(s.mimic_mask)
    assert len(lac) == s.true_count
    assert s.true_category is burden_from_count(s.true_count)
    assert all(equivalent_diameter(c.voxel_count) >= 3.0 for c in lac.components)
    assert all(equivalent_diameter(c.voxel_count) < 3.0 for c in mim.components)
    # placed in white matter, disjoint from mimics
    lm = s.lacune_mask.data > 0
    assert np.all(s.tissue.data[lm] == TISSUE_WM)
    assert not np.any(lm & (s.mimic_mask.data > 0))


def test_tissue_contrast_and_atlas():
    s = generate_phantom(PhantomConfig(dims=(48, 48, 48), noise_sigma=0.0, bias_amplitude=0.0,
                                       lacune_count_range=(2, 2), seed=1))
    atlas = s.region_atlas.data
    brain = s.masks.brain_bool
    assert set(np.unique(atlas[brain])) == set(range(1, 9))
    assert np.all(atlas[~brain] == 0)
    t1_means = [s.t1.data[s.tissue.data == t].mean() for t in (1, 2, 3)]
    flair_means = [s.flair.data[s.tissue.data == t].mean() for t in (1, 2, 3)]
    assert t1_means[0] < t1_means[1] < t1_means[2]
    assert flair_means[0] < flair_means[1] < flair_means[2]
    lac = s.lacune_mask.data > 0
    # CSF-like on T1w
    assert abs(s.t1.data[lac].mean() - t1_means[0]) < 0.02


def test_category_frequencies_follow_config():
    cfg = PhantomConfig(dims=(32, 32, 32), lacune_count_range=(0, 6), lacune_diameter_range_mm=(3, 5),
                        category_probs=(0.5, 0.3, 0.2))
    samples = generate_cohort(cfg, derive_seeds(9, 300))
    counts = np.bincount([int(s.true_category) for s in samples], minlength=3)
    expected = 300 * np.array(cfg.category_probs)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 9.21  # chi-square critical value, 2 dof, alpha 0.01


def test_prior_high_fraction():
    cfg = PhantomConfig(dims=(32, 32, 32), lacune_count_range=(1, 4), lacune_diameter_range_mm=(3, 5),
                        mimic_count_range=(0, 0))
    samples = generate_cohort(cfg, derive_seeds(4, 300))
    hi = total = 0
    for s in samples:
        for c in connected_components(s.lacune_mask).components:
            centre = tuple(np.round(c.voxels.mean(axis=0)).astype(int))
            label = s.region_atlas.data[centre] or np.bincount(
                s.region_atlas.data[tuple(c.voxels.T)].astype(int)).argmax()
            hi += int(label) in cfg.prior_high_regions
            total += 1
    assert 0.7 <= hi / total <= 0.9


def test_bad_configs():
    with pytest.raises(ConfigError):
        PhantomConfig(lacune_diameter_range_mm=(2.0, 5.0))
    with pytest.raises(ConfigError):
        PhantomConfig(mimic_diameter_range_mm=(1.0, 3.0))
    with pytest.raises(ConfigError):
        PhantomConfig(lacune_count_range=(3, 1))
    with pytest.raises(ConfigError):
        PhantomConfig.from_dict({"colour": 1})


def test_placement_failure():
    cfg = PhantomConfig(dims=(16, 16, 16), lacune_count_range=(40, 40), lacune_diameter_range_mm=(6, 8))
    with pytest.raises(PlacementFailure):
        generate_phantom(cfg)


def test_config_roundtrip():
    cfg = PhantomConfig(dims=(40, 32, 24), seed=3)
    assert PhantomConfig.from_dict(cfg.to_dict()) == cfg
