"""Atlas-based location prior for lacune occurrence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import GridMismatch
from ..evaluation.components import connected_components
from ..volio import Volume3D

LAPLACE_ALPHA = 1.0


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Volume3D) else np.asarray(x)


@dataclass(frozen=True)
class LocationPrior:
    table: dict[int, float]
    counts: dict[int, int]
    channel: np.ndarray | None = None  # rendered on the atlas it was built from

    def render(self, atlas) -> np.ndarray:
        """Assign each voxel its region's prior (0 outside labelled regions)."""
        labels = _array(atlas).astype(np.int64)
        out = np.zeros(labels.shape, dtype=np.float32)
        for region, value in self.table.items():
            out[labels == region] = value
        return out

    def mass(self, regions) -> float:
        return float(sum(self.table.get(int(r), 0.0) for r in regions))

    def to_dict(self) -> dict:
        return {"table": {str(k): v for k, v in self.table.items()},
                "counts": {str(k): v for k, v in self.counts.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "LocationPrior":
        return cls({int(k): float(v) for k, v in d["table"].items()},
                   {int(k): int(v) for k, v in d.get("counts", {}).items()})


def _component_region(labels: np.ndarray, voxels: np.ndarray) -> int:
    centre = tuple(np.round(voxels.mean(axis=0)).astype(int))
    region = int(labels[centre])
    if region:
        return region
    # centroid of a curved blob can fall outside the atlas; use the majority label
    vals = labels[tuple(voxels.T)]
    vals = vals[vals > 0]
    if len(vals) == 0:
        return 0
    uniq, counts = np.unique(vals, return_counts=True)
    return int(uniq[np.argmax(counts)])


def build_location_prior(atlas, annotations, alpha: float = LAPLACE_ALPHA,
                         connectivity: int = 26) -> LocationPrior:
    """Laplace-smoothed share of annotated lacunes whose centre lies in each region."""
    labels = _array(atlas).astype(np.int64)
    regions = sorted(int(r) for r in np.unique(labels) if r != 0)
    counts = {r: 0 for r in regions}
    for ann in annotations:
        mask = _array(ann)
        if mask.shape != labels.shape:
            raise GridMismatch(f"annotation grid {mask.shape} differs from atlas {labels.shape}")
        for comp in connected_components(mask, connectivity).components:
            region = _component_region(labels, comp.voxels)
            if region in counts:
                counts[region] += 1
    total = sum(counts.values())
    denom = total + alpha * len(regions)
    table = {r: (counts[r] + alpha) / denom for r in regions}
    prior = LocationPrior(table, counts)
    return LocationPrior(table, counts, prior.render(labels))
