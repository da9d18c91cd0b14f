import json
from dataclasses import replace
from pathlib import Path

import pytest

from lacuna.config import RunConfig, load_config

REPO = Path(__file__).resolve().parents[1]
DESK_CONFIG = REPO / "configs" / "desk.json"


@pytest.fixture(scope="session")
def desk_config() -> RunConfig:
    return load_config(DESK_CONFIG)


@pytest.fixture(scope="session")
def desk_models(desk_config):
    """Both stages trained once on the first 40 committed desk phantoms (fnw_bce)."""
    from lacuna.experiment import build_cohort, train_models

    scans = build_cohort(desk_config)
    train, held_out = scans[:40], scans[40:]
    m1, m2 = train_models(desk_config, train, "fnw_bce", "fixture")
    return m1, m2, held_out


def write_config(path: Path, cfg: RunConfig) -> Path:
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def small_config(**phantom) -> RunConfig:
    """A fast configuration for CLI plumbing tests."""
    base = RunConfig()
    ph = replace(base.phantom, **phantom) if phantom else base.phantom
    return RunConfig.from_dict({
        **base.to_dict(),
        "phantom": ph.to_dict(),
        "cohort": {"size": 6, "seeds": []},
        "stage1": {"unet": {"depth": 2, "base_channels": 2},
                   "train": {"patch_size": 16, "patches_per_epoch": 2, "epochs": 1}},
        "stage2": {"unet": {"depth": 2, "base_channels": 2, "classifier_features": "gap_load"},
                   "train": {"patch_size": 16, "patches_per_epoch": 2, "epochs": 1, "refit_steps": 20}},
        "crossval": {"k": 2, "variants": ["fnw_bce", "voxel_ratio_bce"]},
    })


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
