"""Evaluation metrics, statistical tests and report serialization."""
from .metrics import (Dispersion, RocCurve, auc, fold_dispersion, roc_auc,
                      threshold_metrics, write_roc_csv)
from .report import POSITIVE_CLASS_NOTE, EvalReport
from .special import betainc, norm_sf, t_two_sided_p
from .stattests import (DegenerateInputError, TestResult, fisher_exact, mann_whitney_u,
                        midranks, paired_t, shapiro_wilk, shapiro_wilk_coefficients)

__all__ = [
    "Dispersion", "RocCurve", "auc", "fold_dispersion", "roc_auc", "threshold_metrics",
    "write_roc_csv", "EvalReport", "POSITIVE_CLASS_NOTE", "betainc", "norm_sf",
    "t_two_sided_p", "DegenerateInputError", "TestResult", "fisher_exact",
    "mann_whitney_u", "midranks", "paired_t", "shapiro_wilk", "shapiro_wilk_coefficients",
]
