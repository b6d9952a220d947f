"""Segmentation overlap/surface metrics and diagnostic statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .errors import DegenerateLabels, DegenerateVariance, DimMismatch, EmptySurface, LengthMismatch


def dice(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise DimMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_distances(surface_a, surface_b) -> tuple[float, float]:
    """Symmetric (mean, max) nearest-point distance between two point sets."""
    a = np.asarray(surface_a, dtype=float).reshape(-1, 3)
    b = np.asarray(surface_b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySurface("surface point sets must be non-empty")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    pooled = np.concatenate([d_ab, d_ba])
    return float(pooled.mean()), float(pooled.max())


def _positive(scores, threshold, lower_is_positive: bool) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    return s <= threshold if lower_is_positive else s >= threshold


def _orient(scores, lower_is_positive: bool) -> np.ndarray:
    """Scores where larger means more likely positive."""
    s = np.asarray(scores, dtype=float)
    return -s if lower_is_positive else s


@dataclass(frozen=True)
class ConfusionStats:
    """Counts plus derived rates; a rate with an empty denominator is NaN."""

    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def _ratio(num: int, den: int) -> float:
        return num / den if den else float("nan")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return self._ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self) -> float:
        return self._ratio(self.tn, self.tn + self.fn)

    @property
    def accuracy(self) -> float:
        return self._ratio(self.tp + self.tn, self.n)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("sensitivity", "specificity", "ppv", "npv", "accuracy"):
            value = getattr(self, name)
            d[name] = None if math.isnan(value) else value
        return d


def confusion(scores, labels, threshold: float, lower_is_positive: bool = True) -> ConfusionStats:
    """Confusion counts for ``score <= threshold`` (or ``>=``) as the positive call."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise LengthMismatch(f"{len(s)} scores for {len(y)} labels")
    pred = _positive(s, threshold, lower_is_positive)
    return ConfusionStats(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray  # original score units; +/-inf at the (0, 0) end
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def trapezoid_auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * 0.5 * (self.tpr[1:] + self.tpr[:-1])))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise LengthMismatch(f"{len(s)} scores for {len(y)} labels")
    if y.all() or not y.any():
        raise DegenerateLabels("need at least one positive and one negative case")
    return s, y


def mann_whitney_auc(scores, labels, lower_is_positive: bool = True) -> float:
    s, y = _check_binary(scores, labels)
    s = _orient(s, lower_is_positive)
    ranks = stats.rankdata(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels, lower_is_positive: bool = True) -> RocCurve:
    """ROC operating points over all distinct thresholds and the Mann-Whitney AUC."""
    s, y = _check_binary(scores, labels)
    oriented = _orient(s, lower_is_positive)
    distinct = np.unique(oriented)[::-1]
    n_pos = y.sum()
    n_neg = len(y) - n_pos
    tpr = [0.0]
    fpr = [0.0]
    for t in distinct:
        called = oriented >= t
        tpr.append(float(np.sum(called & y) / n_pos))
        fpr.append(float(np.sum(called & ~y) / n_neg))
    thresholds = np.concatenate([[np.inf], distinct])
    if lower_is_positive:
        thresholds = -thresholds
    return RocCurve(thresholds, np.array(fpr), np.array(tpr), mann_whitney_auc(s, y, lower_is_positive))


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p_value: float
    variance: float


def _placements(scores: np.ndarray, y: np.ndarray):
    """Structural components: per-positive V10 and per-negative V01."""
    pos = scores[y]
    neg = scores[~y]
    # psi(x, z) = 1 if x > z, 0.5 if tie
    cmp = (pos[:, None] > neg[None, :]).astype(float) + 0.5 * (pos[:, None] == neg[None, :])
    return cmp.mean(axis=1), cmp.mean(axis=0)


def delong_test(scores_a, scores_b, labels, lower_is_positive: bool = True) -> DeLongResult:
    """Paired comparison of two correlated AUCs (DeLong, DeLong & Clarke-Pearson)."""
    sa, y = _check_binary(scores_a, labels)
    sb, _ = _check_binary(scores_b, labels)
    sa = _orient(sa, lower_is_positive)
    sb = _orient(sb, lower_is_positive)
    v10_a, v01_a = _placements(sa, y)
    v10_b, v01_b = _placements(sb, y)
    auc_a, auc_b = float(v10_a.mean()), float(v10_b.mean())
    m, n = len(v10_a), len(v01_a)
    s10 = np.cov(np.stack([v10_a, v10_b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.stack([v01_a, v01_b])) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var = float(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1])
    # relative floor: identical inputs leave only rounding residue
    if not var > 1e-12 * (cov[0, 0] + cov[1, 1]) or var <= 0.0:
        raise DegenerateVariance(
            f"variance of the AUC difference is {var:.3e}; AUCs {auc_a:.6f} vs {auc_b:.6f} cannot be tested"
        )
    z = (auc_a - auc_b) / math.sqrt(var)
    p = float(2.0 * stats.norm.sf(abs(z)))
    return DeLongResult(auc_a, auc_b, float(z), p, var)
