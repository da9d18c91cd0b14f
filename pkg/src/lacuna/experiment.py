"""Cohort construction, k-fold training/evaluation and the loss comparison."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .config import RunConfig, sub_seed
from .errors import PlacementFailure, ZeroVariance
from .evaluation import (
    MetricsReport,
    ScanMetrics,
    connected_components,
    instance_sensitivity,
    paired_ttest,
    stratified_kfold,
)
from .phantom import PhantomSample, burden_from_count, derive_seeds, generate_cohort, generate_phantom
from .pipeline import (
    ScanSet,
    StageModel,
    build_location_prior,
    infer_volume,
    postprocess,
    scanset_from_phantom,
    train_stage,
)

log = logging.getLogger(__name__)


def cohort_samples(cfg: RunConfig) -> list[PhantomSample]:
    """Phantoms of the configured cohort.

    Explicit seeds must all be placeable.  Derived seeds that cannot host
    their drawn lacune count are skipped, in order, until the cohort is full.
    """
    if cfg.cohort.seeds:
        return generate_cohort(cfg.phantom, cfg.cohort.seeds)
    samples = []
    for seed in derive_seeds(sub_seed(cfg.seed, "cohort"), 4 * cfg.cohort.size):
        try:
            samples.append(generate_phantom(replace(cfg.phantom, seed=int(seed))))
        except PlacementFailure:
            log.info("skipping unplaceable phantom seed %d", seed)
            continue
        if len(samples) == cfg.cohort.size:
            return samples
    raise PlacementFailure(f"fewer than {cfg.cohort.size} placeable phantoms among derived seeds")


def build_cohort(cfg: RunConfig) -> list[ScanSet]:
    """Generate and preprocess the configured phantom cohort."""
    samples = cohort_samples(cfg)
    return [scanset_from_phantom(s, bias_order=cfg.bias_order) for s in samples]


def train_models(cfg: RunConfig, train: list[ScanSet], variant: str, tag: str,
                 progress=None) -> tuple[StageModel, StageModel]:
    loss = cfg.loss_for(variant)
    m1 = train_stage(1, train, cfg.train_run(1, tag), cfg.stage1.unet, loss, progress=progress)
    prior = build_location_prior(train[0].atlas, [s.lacune_mask for s in train if s.lacune_mask is not None],
                                 connectivity=cfg.eval.connectivity)
    m2 = train_stage(2, train, cfg.train_run(2, tag), cfg.stage2.unet, loss, stage1=m1, prior=prior,
                     progress=progress)
    return m1, m2


def evaluate_scan(cfg: RunConfig, m1: StageModel, m2: StageModel, scan: ScanSet, fold: int = -1):
    """Infer one labelled scan; returns (ScanMetrics, InferenceResult, predicted mask)."""
    res = infer_volume(m1, m2, scan)
    pp = cfg.postprocess
    mask, pred = postprocess(res.prob, pp.threshold, pp.min_component_voxels, pp.connectivity)
    gt = connected_components(scan.volume(scan.lacune_mask), cfg.eval.connectivity)
    inst = instance_sensitivity(pred, gt, cfg.eval.rule, cfg.eval.iou_threshold)
    metrics = ScanMetrics(
        id=scan.id, fold=fold, detected=inst.detected, total=inst.total, sensitivity=inst.sensitivity,
        fp_count=inst.fp_count, true_category=int(scan.true_category), predicted_category=int(res.burden),
        class_probs=[float(p) for p in res.class_probs], count_category=int(burden_from_count(len(pred))),
    )
    return metrics, res, mask


@dataclass
class Comparison:
    """Paired comparison of per-scan sensitivity between two loss variants."""

    a: str
    b: str
    mean_a: float | None
    mean_b: float | None
    n_pairs: int
    t: float | None
    p_two_sided: float | None
    folds_a_better: int
    fold_means: dict[str, list[float | None]]

    def to_dict(self) -> dict:
        return asdict(self)


def compare(a: str, b: str, ra: MetricsReport, rb: MetricsReport) -> Comparison:
    sa = {s.id: s.sensitivity for s in ra.per_scan}
    sb = {s.id: s.sensitivity for s in rb.per_scan}
    ids = sorted(i for i in sa if sa[i] is not None and sb.get(i) is not None)
    x = [sa[i] for i in ids]
    y = [sb[i] for i in ids]
    try:
        tt = paired_ttest(x, y)
        t, p = tt.t, tt.p_two_sided
    except ZeroVariance:
        # identical paired scores everywhere: no evidence of a difference
        t, p = (0.0, 1.0) if ids else (None, None)
    folds = sorted(set(ra.per_fold_sensitivity) | set(rb.per_fold_sensitivity), key=int)
    fold_means = {f: [ra.per_fold_sensitivity.get(f), rb.per_fold_sensitivity.get(f)] for f in folds}
    better = sum(1 for ma, mb in fold_means.values() if ma is not None and mb is not None and ma > mb)
    return Comparison(a, b, float(np.mean(x)) if x else None, float(np.mean(y)) if y else None,
                      len(ids), t, p, better, fold_means)


@dataclass
class CrossvalResult:
    folds: dict[str, int]
    reports: dict[str, MetricsReport]
    comparison: Comparison | None


def run_crossval(cfg: RunConfig, scans: list[ScanSet] | None = None, progress=None) -> CrossvalResult:
    """k-fold loop per loss variant: split, train both stages, infer held-out scans, aggregate.

    Every variant sees the same folds and the same per-fold training seeds,
    so per-scan sensitivities pair up across variants.
    """
    scans = build_cohort(cfg) if scans is None else scans
    k = cfg.crossval.k
    folds = stratified_kfold([(s.id, s.true_category) for s in scans], k, seed=sub_seed(cfg.seed, "folds"))
    reports = {}
    for variant in cfg.crossval.variants:
        per_scan = []
        for f in range(k):
            train = [s for s in scans if folds[s.id] != f]
            held = [s for s in scans if folds[s.id] == f]
            log.info("%s fold %d/%d: %d train, %d held out", variant, f + 1, k, len(train), len(held))
            m1, m2 = train_models(cfg, train, variant, f"fold{f}", progress)
            per_scan.extend(evaluate_scan(cfg, m1, m2, s, f)[0] for s in held)
        reports[variant] = MetricsReport.from_scans(per_scan)
    comparison = None
    if len(cfg.crossval.variants) >= 2:
        a, b = cfg.crossval.variants[:2]
        comparison = compare(a, b, reports[a], reports[b])
    return CrossvalResult(folds, reports, comparison)
