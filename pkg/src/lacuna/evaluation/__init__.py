"""Instance-wise evaluation, burden metrics, fold splitting and statistics."""
from .components import Component, ComponentSet, connected_components, count_components
from .folds import fold_members, stratified_kfold
from .metrics import (
    InstanceResult,
    MetricsReport,
    ScanMetrics,
    accuracy,
    bca,
    bca_from_recalls,
    confusion_csv,
    confusion_matrix,
    instance_sensitivity,
    per_class_recall,
)
from .stats import TTestResult, betainc_regularized, paired_ttest, permutation_paired_p, t_two_sided_p

__all__ = [
    "Component", "ComponentSet", "connected_components", "count_components",
    "stratified_kfold", "fold_members",
    "InstanceResult", "MetricsReport", "ScanMetrics", "accuracy", "bca", "bca_from_recalls",
    "confusion_csv", "confusion_matrix", "instance_sensitivity", "per_class_recall",
    "TTestResult", "betainc_regularized", "paired_ttest", "permutation_paired_p", "t_two_sided_p",
]
