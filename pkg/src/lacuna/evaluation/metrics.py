"""Instance-wise detection metrics, confusion matrices and BCA."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import EmptyClassRow, GridMismatch
from .components import ComponentSet

MATCH_RULES = ("any_voxel", "centroid_inside", "iou")


@dataclass(frozen=True)
class InstanceResult:
    detected: int
    total: int
    sensitivity: float | None  # None when the scan has no GT instances
    fp_count: int


def instance_sensitivity(pred: ComponentSet, gt: ComponentSet, rule: str = "any_voxel",
                         iou_threshold: float = 0.1) -> InstanceResult:
    """Count detected ground-truth components and unmatched predictions.

    ``any_voxel``: a GT component is detected when any of its voxels is
    predicted.  ``centroid_inside``: when the centroid voxel of an
    overlapping predicted component falls inside it.  ``iou``: when some
    predicted component reaches ``iou_threshold``.  A predicted component
    that touches no GT voxel is a false positive under every rule.
    """
    if pred.shape != gt.shape:
        raise GridMismatch(f"prediction grid {pred.shape} vs ground truth {gt.shape}")
    if rule not in MATCH_RULES:
        raise ValueError(f"unknown matching rule {rule!r}; choose from {MATCH_RULES}")

    detected = 0
    for comp in gt.components:
        hits = pred.labels[tuple(comp.voxels.T)]
        ids = np.unique(hits[hits > 0])
        if rule == "any_voxel":
            ok = len(ids) > 0
        elif rule == "centroid_inside":
            ok = False
            for pid in ids:
                c = np.round(pred.components[pid - 1].voxels.mean(axis=0)).astype(int)
                ok = ok or gt.labels[tuple(c)] == comp.id
        else:
            ok = False
            for pid in ids:
                inter = int(np.sum(hits == pid))
                union = comp.voxel_count + pred.components[pid - 1].voxel_count - inter
                ok = ok or inter / union >= iou_threshold
        detected += bool(ok)

    gt_mask = gt.labels > 0
    fp = sum(1 for c in pred.components if not gt_mask[tuple(c.voxels.T)].any())
    total = len(gt.components)
    sens = detected / total if total else None
    return InstanceResult(detected, total, sens, fp)


def confusion_matrix(pairs, n_classes: int = 3) -> np.ndarray:
    """Rows are true categories, columns predicted."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for true, pred in pairs:
        cm[int(true), int(pred)] += 1
    return cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    return float(np.trace(cm) / total) if total else float("nan")


def per_class_recall(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1)
    if np.any(rows == 0):
        raise EmptyClassRow(f"classes {np.flatnonzero(rows == 0).tolist()} have no samples")
    return np.diag(cm) / rows


def bca(cm) -> float:
    """Balanced classification accuracy: mean of per-class recalls."""
    return float(per_class_recall(cm).mean())


def bca_from_recalls(recalls) -> float:
    return float(np.mean(recalls))


def _mean_sd(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


@dataclass
class ScanMetrics:
    id: str
    fold: int
    detected: int
    total: int
    sensitivity: float | None
    fp_count: int
    true_category: int
    predicted_category: int
    class_probs: list[float] = field(default_factory=list)
    count_category: int | None = None


@dataclass
class MetricsReport:
    per_scan: list[ScanMetrics]
    sensitivity_mean: float | None
    sensitivity_sd: float | None
    per_fold_sensitivity: dict[str, float | None]
    fp_mean: float
    confusion: list[list[int]]
    accuracy: float
    bca: float | None
    per_class_recall: list[float] | None
    count_confusion: list[list[int]] | None
    count_bca: float | None
    folds: dict[str, int]

    @classmethod
    def from_scans(cls, scans: list[ScanMetrics]) -> "MetricsReport":
        mean, sd = _mean_sd([s.sensitivity for s in scans])
        folds = sorted({s.fold for s in scans})
        per_fold = {str(f): _mean_sd([s.sensitivity for s in scans if s.fold == f])[0] for f in folds}
        cm = confusion_matrix((s.true_category, s.predicted_category) for s in scans)
        try:
            recalls = per_class_recall(cm).tolist()
            b = float(np.mean(recalls))
        except EmptyClassRow:
            recalls, b = None, None
        count_cm, count_b = None, None
        if all(s.count_category is not None for s in scans) and scans:
            ccm = confusion_matrix((s.true_category, s.count_category) for s in scans)
            count_cm = ccm.tolist()
            try:
                count_b = bca(ccm)
            except EmptyClassRow:
                count_b = None
        return cls(
            per_scan=scans,
            sensitivity_mean=mean,
            sensitivity_sd=sd,
            per_fold_sensitivity=per_fold,
            fp_mean=float(np.mean([s.fp_count for s in scans])) if scans else 0.0,
            confusion=cm.tolist(),
            accuracy=accuracy(cm),
            bca=b,
            per_class_recall=recalls,
            count_confusion=count_cm,
            count_bca=count_b,
            folds={s.id: s.fold for s in scans},
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return _finite(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def confusion_csv(self) -> str:
        return confusion_csv(self.confusion)


def confusion_csv(cm) -> str:
    labels = ["0", "1-3", ">3"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\predicted", *labels])
    for label, row in zip(labels, cm):
        w.writerow([label, *[int(v) for v in row]])
    return buf.getvalue()


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj
