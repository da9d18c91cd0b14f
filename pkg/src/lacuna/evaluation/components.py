"""3D connected-component labeling."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from ..errors import ShapeMismatch
from ..volio import Volume3D


@dataclass(frozen=True, eq=False)
class Component:
    id: int
    voxel_count: int
    centroid_mm: tuple[float, float, float]
    voxels: np.ndarray = field(repr=False)  # (n, 3) integer indices


@dataclass(frozen=True, eq=False)
class ComponentSet:
    labels: np.ndarray  # int32, 0 = background, ids 1..K
    components: list[Component]
    affine: np.ndarray = field(default_factory=lambda: np.eye(4), repr=False)

    def __len__(self) -> int:
        return len(self.components)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    def mask(self) -> np.ndarray:
        return self.labels > 0


def neighbour_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    """Half of the neighbourhood: offsets that precede a voxel in raster order."""
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    out = []
    for off in product((-1, 0, 1), repeat=3):
        n_nonzero = sum(o != 0 for o in off)
        if n_nonzero == 0:
            continue
        if connectivity == 6 and n_nonzero > 1 or connectivity == 18 and n_nonzero > 2:
            continue
        if off < (0, 0, 0):
            out.append(off)
    return out


def _pairs(index: np.ndarray, off) -> tuple[np.ndarray, np.ndarray]:
    """Foreground index pairs (voxel, voxel + off) for one neighbour offset."""
    src, dst = [], []
    for o, n in zip(off, index.shape):
        if o >= 0:
            src.append(slice(0, n - o))
            dst.append(slice(o, n))
        else:
            src.append(slice(-o, n))
            dst.append(slice(0, n + o))
    a = index[tuple(src)]
    b = index[tuple(dst)]
    keep = (a >= 0) & (b >= 0)
    return a[keep], b[keep]


def _find(parent: list[int], x: int) -> int:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def connected_components(mask, connectivity: int = 26) -> ComponentSet:
    """Label foreground components with union-find over neighbour pairs.

    Provisional labels are the raster positions of foreground voxels; the
    first pass records equivalences with already-visited neighbours, the
    second resolves each voxel to its root.  Final ids are dense 1..K in
    order of each component's first voxel.
    """
    if isinstance(mask, Volume3D):
        arr, affine = mask.data, mask.affine
    else:
        arr, affine = np.asarray(mask), np.eye(4)
    if arr.ndim != 3:
        raise ShapeMismatch(f"connected_components needs a 3D mask, got shape {arr.shape}")
    fg = arr > 0
    coords = np.argwhere(fg)
    n = len(coords)
    index = np.full(fg.shape, -1, dtype=np.int64)
    index[fg] = np.arange(n)

    parent = list(range(n))
    for off in neighbour_offsets(connectivity):
        a, b = _pairs(index, off)
        for x, y in zip(a.tolist(), b.tolist()):
            rx, ry = _find(parent, x), _find(parent, y)
            if rx != ry:
                # keep the earlier raster position as root
                if rx < ry:
                    parent[ry] = rx
                else:
                    parent[rx] = ry

    roots = np.fromiter((_find(parent, i) for i in range(n)), dtype=np.int64, count=n)
    labels = np.zeros(fg.shape, dtype=np.int32)
    components = []
    if n:
        uniq, dense = np.unique(roots, return_inverse=True)
        # roots are the minimal raster index of their component, so sorted
        # order of roots is first-voxel order
        dense = dense.reshape(-1) + 1
        labels[fg] = dense
        order = np.argsort(dense, kind="stable")
        bounds = np.searchsorted(dense[order], np.arange(1, len(uniq) + 2))
        for cid in range(1, len(uniq) + 1):
            vox = coords[order[bounds[cid - 1]:bounds[cid]]]
            centre = vox.mean(axis=0)
            centroid = affine[:3, :3] @ centre + affine[:3, 3]
            components.append(Component(cid, len(vox), tuple(float(c) for c in centroid), vox))
    return ComponentSet(labels, components, np.asarray(affine))


def count_components(mask, connectivity: int = 26) -> int:
    return len(connected_components(mask, connectivity))
