"""Centerline intensity profiles, robust PVE detection and radius estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_io import CylindricalGrid, ScalarVolume, sample_points
from .errors import AllOutliers, DataError, InsufficientRange, LengthMismatch, RankDeficient

# Residual spread below this (HU) is treated as exact: keeps floating-point
# jitter on noise-free profiles from being flagged as outliers.
SIGMA_FLOOR = 1e-6
OUTLIER_K = 2.0
RADIUS_FLOOR = 0.25
USABLE_REDUCTION = (0.02, 0.8)


@dataclass(frozen=True, eq=False)
class IntensityProfile:
    arc_length: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.arc_length, dtype=float)
        i = np.asarray(self.intensity, dtype=float)
        if s.shape != i.shape or s.ndim != 1:
            raise LengthMismatch(f"arc_length {s.shape} and intensity {i.shape} differ")
        if np.any(np.diff(s) <= 0):
            raise DataError("arc_length must be strictly increasing")
        object.__setattr__(self, "arc_length", s)
        object.__setattr__(self, "intensity", i)

    def __len__(self):
        return len(self.arc_length)


@dataclass(frozen=True, eq=False)
class ProfileModel:
    beta: np.ndarray  # (b0 HU, b1 HU/mm, b2 HU/mm^2)
    sigma: float
    pve_mask: np.ndarray
    phase1_sigma: float = float("nan")

    def expected(self, arc_length) -> np.ndarray:
        s = np.asarray(arc_length, dtype=float)
        b0, b1, b2 = self.beta
        return b0 + b1 * s + b2 * s * s

    @property
    def any_pve(self) -> bool:
        return bool(np.any(self.pve_mask))


@dataclass(frozen=True)
class RadiusModel:
    """Linear lumen-diameter model ``d = alpha * reduction + beta`` (mm)."""

    alpha: float = -2.0
    beta: float = 1.4

    def __post_init__(self):
        if not self.beta > 0:
            raise DataError(f"radius model beta must be > 0, got {self.beta}")
        if not self.alpha < 0:
            raise DataError(f"radius model alpha must be < 0, got {self.alpha}")

    def to_dict(self) -> dict:
        return {"alpha_mm": self.alpha, "beta_mm": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> "RadiusModel":
        return cls(alpha=float(d["alpha_mm"]), beta=float(d["beta_mm"]))


def _lstsq_quadratic(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    if len(np.unique(s)) < 3:
        raise RankDeficient("need at least 3 distinct arc-lengths for a quadratic fit")
    design = np.stack([np.ones_like(s), s, s * s], axis=1)
    beta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 3:
        raise RankDeficient(f"quadratic design matrix has rank {rank}")
    return beta


def fit_polynomial(profile: IntensityProfile) -> ProfileModel:
    """Least-squares quadratic in arc-length; residual SD as sigma."""
    if len(profile) < 3:
        raise RankDeficient("need at least 3 samples")
    beta = _lstsq_quadratic(profile.arc_length, profile.intensity)
    model = ProfileModel(beta, 0.0, np.zeros(len(profile), dtype=bool))
    resid = profile.intensity - model.expected(profile.arc_length)
    return ProfileModel(beta, float(np.std(resid)), model.pve_mask)


def _below_model(profile: IntensityProfile, model: ProfileModel) -> np.ndarray:
    sigma = max(model.sigma, SIGMA_FLOOR)
    return profile.intensity <= model.expected(profile.arc_length) - OUTLIER_K * sigma


def detect_pve(profile: IntensityProfile) -> ProfileModel:
    """Two-phase robust fit; flags samples at least 2 SD below the model.

    Phase 1 fits all samples and drops the low outliers; phase 2 refits on the
    remaining samples. The returned mask is re-evaluated against the phase-2
    model and its residual SD.
    """
    if len(profile) < 10:
        raise RankDeficient(f"need at least 10 samples, got {len(profile)}")
    first = fit_polynomial(profile)
    outliers = _below_model(profile, first)
    keep = ~outliers
    if keep.sum() < 3:
        raise AllOutliers(f"only {int(keep.sum())} samples left after outlier removal")
    clean = IntensityProfile(profile.arc_length[keep], profile.intensity[keep])
    second = fit_polynomial(clean)
    mask = _below_model(profile, second)
    return ProfileModel(second.beta, second.sigma, mask, phase1_sigma=first.sigma)


def estimate_radius(model: RadiusModel, intensity_ratio: float) -> float:
    """Lumen radius (mm) from the centerline-to-expected intensity ratio."""
    if not 0.0 < intensity_ratio <= 1.5:
        raise DataError(f"intensity ratio {intensity_ratio} outside (0, 1.5]")
    r = 0.5 * (model.alpha * (1.0 - intensity_ratio) + model.beta)
    return max(r, RADIUS_FLOOR)


def calibrate_radius_model(curve) -> RadiusModel:
    """Fit ``diameter = alpha * reduction + beta`` to ``(diameter, reduction)`` pairs.

    Only points with reduction strictly inside ``USABLE_REDUCTION`` are used.
    """
    pts = np.asarray(list(curve), dtype=float).reshape(-1, 2)
    lo, hi = USABLE_REDUCTION
    usable = pts[(pts[:, 1] > lo) & (pts[:, 1] < hi)]
    if len(np.unique(usable[:, 0])) < 2:
        raise InsufficientRange(
            f"{len(usable)} usable calibration points with reduction in ({lo}, {hi}); need >= 2 diameters"
        )
    design = np.stack([usable[:, 1], np.ones(len(usable))], axis=1)
    (alpha, beta), *_ = np.linalg.lstsq(design, usable[:, 0], rcond=None)
    return RadiusModel(alpha=float(alpha), beta=float(beta))


def centerline_profile(vol: ScalarVolume, grid: CylindricalGrid) -> IntensityProfile:
    """HU sampled at each plane center of ``grid``."""
    values, _ = sample_points(vol, grid.plane_center)
    return IntensityProfile(grid.plane_arc_length, values)


def plane_radius_estimates(profile: IntensityProfile, model: ProfileModel, radius_model: RadiusModel) -> np.ndarray:
    """Estimated radius per plane; NaN where no PVE is flagged."""
    expected = model.expected(profile.arc_length)
    out = np.full(len(profile), np.nan)
    for i in np.flatnonzero(model.pve_mask):
        if expected[i] <= 0:
            continue
        ratio = float(np.clip(profile.intensity[i] / expected[i], 1e-9, 1.5))
        out[i] = estimate_radius(radius_model, ratio)
    return out
