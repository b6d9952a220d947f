"""Paired PVE on/off diagnostic report: confusion, ROC/AUC and DeLong."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateLabels, DegenerateVariance
from .metrics import confusion, delong_test, roc_auc
from .plots import roc_svg


def labels_from_reference(values, threshold: float) -> np.ndarray:
    """Binary labels; non-binary columns are read as reference FFR values."""
    v = np.asarray(values, dtype=float)
    if np.all(np.isin(v, (0.0, 1.0))):
        return v.astype(bool)
    return v <= threshold


def roc_report(scores_on, scores_off, labels, threshold: float = 0.8):
    """Returns ``(report dict, roc csv rows or None, roc svg or None)``."""
    y = np.asarray(labels).astype(bool)
    report = {
        "threshold": threshold,
        "n_cases": int(len(y)),
        "n_positive": int(y.sum()),
        "direction": "lower_is_positive",
    }
    curves = []
    rows = []
    for name, scores in (("pve_on", scores_on), ("pve_off", scores_off)):
        entry = confusion(scores, y, threshold).to_dict()
        try:
            curve = roc_auc(scores, y)
        except DegenerateLabels as exc:
            entry["auc"] = None
            entry["auc_error"] = str(exc)
        else:
            entry["auc"] = curve.auc
            curves.append((name, curve))
            rows.extend([name, t, f, p] for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr))
        report[name] = entry
    try:
        res = delong_test(scores_on, scores_off, y)
        report["delong"] = {"auc_pve_on": res.auc_a, "auc_pve_off": res.auc_b, "z": res.z, "p_value": res.p_value}
    except (DegenerateLabels, DegenerateVariance) as exc:
        report["delong"] = {"error": type(exc).__name__, "message": str(exc)}
    if len(curves) < 2:
        return report, None, None
    return report, rows, roc_svg(curves)
