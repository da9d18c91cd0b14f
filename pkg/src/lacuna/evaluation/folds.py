"""Deterministic stratified k-fold assignment."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..errors import KTooLarge


def stratified_kfold(items, k: int = 10, seed: int = 0) -> dict:
    """Map each item id to a fold in ``0..k-1``.

    Items of each category are shuffled with a seeded generator and dealt
    round-robin; the dealing position carries over between categories so
    total fold sizes also differ by at most one.
    """
    items = list(items)
    if k < 1:
        raise KTooLarge(f"k must be >= 1, got {k}")
    if k > len(items):
        raise KTooLarge(f"k={k} exceeds the number of items ({len(items)})")
    groups = defaultdict(list)
    for item_id, cat in items:
        groups[int(cat)].append(item_id)
    rng = np.random.default_rng(seed)
    folds = {}
    pos = 0
    for cat in sorted(groups):
        members = groups[cat]
        for i in rng.permutation(len(members)):
            folds[members[i]] = pos % k
            pos += 1
    return folds


def fold_members(folds: dict, k: int) -> list[list]:
    out = [[] for _ in range(k)]
    for item_id, f in folds.items():
        out[f].append(item_id)
    return out
