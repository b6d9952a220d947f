"""KNN ray database and lumen probabilities on the cylindrical grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_io import warp_to_cylindrical
from .errors import DataError, EmptyDatabase, LengthMismatch

SOURCE_DATA = 0
SOURCE_PVE = 1
SOURCE_CALCIUM = 2
SOURCE_NAMES = {SOURCE_DATA: "data", SOURCE_PVE: "pve_override", SOURCE_CALCIUM: "calcium_override"}

DEFAULT_K = 100
CALCIUM_THRESHOLD_HU = 600.0
P_CALCIUM = 0.01
# Rows of (queries x database) distances evaluated per block.
_BLOCK_ELEMENTS = 4_000_000


def default_kernel_lambda(n_radii: int, rms_hu: float = 50.0) -> float:
    """Weight decay giving ``exp(-1)`` for a per-sample RMS difference of ``rms_hu``."""
    return 1.0 / (n_radii * rms_hu**2)


@dataclass(frozen=True, eq=False)
class RayDatabase:
    """Training intensity rays and matching binary lumen labels.

    Intensities are held in float32, the precision of the on-disk format.
    """

    radii: np.ndarray
    intensity_rays: np.ndarray
    label_rays: np.ndarray
    kernel_lambda: float
    k_neighbors: int = DEFAULT_K
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=np.float32)
        inten = np.asarray(self.intensity_rays, dtype=np.float32)
        labels = np.asarray(self.label_rays, dtype=np.uint8)
        if inten.ndim != 2 or inten.shape != labels.shape or inten.shape[1] != len(radii):
            raise DataError(
                f"ray arrays must be (n_rays, {len(radii)}); got intensities {inten.shape}, labels {labels.shape}"
            )
        if len(inten) == 0:
            raise EmptyDatabase("ray database is empty")
        if np.any(labels > 1):
            raise DataError("label rays must be binary")
        if np.any(labels[:, 1:] > labels[:, :-1]):
            raise DataError("label rays must be 1 on a prefix of radii and 0 after")
        if not self.kernel_lambda > 0:
            raise DataError("kernel_lambda must be positive")
        if self.k_neighbors < 1:
            raise DataError("k_neighbors must be >= 1")
        for arr in (radii, inten, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "intensity_rays", inten)
        object.__setattr__(self, "label_rays", labels)
        object.__setattr__(self, "kernel_lambda", float(self.kernel_lambda))
        object.__setattr__(self, "k_neighbors", int(self.k_neighbors))

    @property
    def n_rays(self) -> int:
        return self.intensity_rays.shape[0]

    @property
    def n_radii(self) -> int:
        return self.intensity_rays.shape[1]


def prefix_labels(labels: np.ndarray) -> np.ndarray:
    """Truncate each ray's labels at its first zero (along the last axis)."""
    return np.cumprod(np.asarray(labels, dtype=np.uint8), axis=-1).astype(np.uint8)


def build_ray_database(
    phantoms: Sequence,
    n_angles: int = 32,
    radii=None,
    plane_spacing: float = 0.5,
    kernel_lambda: Optional[float] = None,
    k_neighbors: int = DEFAULT_K,
) -> RayDatabase:
    """Collect every (plane, angle) ray from labeled phantoms."""
    rays, labels = [], []
    used_radii = None
    for ph in phantoms:
        vol_grid = warp_to_cylindrical(ph.volume, ph.centerline, n_angles, radii, plane_spacing)
        used_radii = vol_grid.radii
        rays.append(vol_grid.intensities.reshape(-1, len(used_radii)))
        labels.append(_phantom_labels(ph, vol_grid, n_angles, radii, plane_spacing).reshape(-1, len(used_radii)))
    if not rays or sum(len(r) for r in rays) == 0:
        raise EmptyDatabase("no rays were produced from the training phantoms")
    if kernel_lambda is None:
        kernel_lambda = default_kernel_lambda(len(used_radii))
    return RayDatabase(
        radii=used_radii,
        intensity_rays=np.concatenate(rays),
        label_rays=np.concatenate(labels),
        kernel_lambda=kernel_lambda,
        k_neighbors=k_neighbors,
        provenance={"n_phantoms": len(rays), "n_angles": n_angles, "plane_spacing_mm": plane_spacing},
    )


def _phantom_labels(ph, vol_grid, n_angles, radii, plane_spacing) -> np.ndarray:
    # Straight phantoms know their exact lumen radius per plane; interpolating
    # the voxel mask would blur the boundary by up to a voxel.
    if getattr(ph, "spec", None) is not None:
        r_true = ph.radius(vol_grid.plane_arc_length)
        inside = vol_grid.radii[None, None, :] <= r_true[:, None, None] + 1e-9
        return prefix_labels(np.broadcast_to(inside, vol_grid.intensities.shape))
    mask_grid = warp_to_cylindrical(ph.lumen_mask, ph.centerline, n_angles, radii, plane_spacing)
    return prefix_labels(mask_grid.intensities >= 0.5)


def ray_weight(test_ray, train_ray, kernel_lambda: float) -> float:
    a = np.asarray(test_ray, dtype=float)
    b = np.asarray(train_ray, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"ray lengths differ: {a.shape} vs {b.shape}")
    return float(np.exp(-kernel_lambda * np.sum((a - b) ** 2)))


def nearest_rays(db: RayDatabase, queries, k: int, exclude_exact: bool = False):
    """Exact K nearest database rays by squared L2 distance.

    Ties are broken by lower ray index. With ``exclude_exact`` set, database
    rays at distance exactly zero are skipped (leave-one-out evaluation).
    Returns ``(indices, squared_distances)``, each ``(n_queries, k)``.
    """
    q = np.asarray(queries, dtype=float)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != db.n_radii:
        raise LengthMismatch(f"query rays have {q.shape[1]} samples, database has {db.n_radii}")
    train = db.intensity_rays.astype(float)
    n = len(train)
    train_sq = np.einsum("ij,ij->i", train, train)
    block = max(1, _BLOCK_ELEMENTS // max(n, 1))

    out_idx, out_d2 = [], []
    for start in range(0, len(q), block):
        qb = q[start : start + block]
        q_sq = np.einsum("ij,ij->i", qb, qb)
        approx = q_sq[:, None] + train_sq[None, :] - 2.0 * qb @ train.T
        # bound on the cancellation error of the expanded form
        slack = 1e-10 * (q_sq[:, None] + train_sq.max()) + 1e-9
        if exclude_exact:
            near_zero = approx <= slack
        for row in range(len(qb)):
            d_row = approx[row]
            if exclude_exact and near_zero[row].any():
                cand0 = np.flatnonzero(near_zero[row])
                exact0 = np.sum((train[cand0] - qb[row]) ** 2, axis=1)
                d_row = d_row.copy()
                d_row[cand0[exact0 == 0.0]] = np.inf
            available = int(np.isfinite(d_row).sum())
            kk = min(k, available)
            if kk == 0:
                raise EmptyDatabase("no database rays left after excluding exact matches")
            kth = np.partition(d_row, kk - 1)[kk - 1]
            cand = np.flatnonzero(d_row <= kth + 2.0 * slack[row, 0])
            exact = np.sum((train[cand] - qb[row]) ** 2, axis=1)
            order = np.lexsort((cand, exact))[:kk]
            out_idx.append(cand[order])
            out_d2.append(exact[order])
    return np.array(out_idx), np.array(out_d2)


def _weighted_labels(db: RayDatabase, idx: np.ndarray, d2: np.ndarray) -> np.ndarray:
    # Shifting by the nearest distance rescales all weights of a query by the
    # same factor, so the ratio is unchanged but cannot underflow to 0/0.
    w = np.exp(-db.kernel_lambda * (d2 - d2[:, :1]))
    labels = db.label_rays[idx].astype(float)
    # accumulate numerator and denominator in the same order so unanimous
    # labels give exactly 0 or 1
    num = np.zeros((len(w), labels.shape[2]))
    den = np.zeros((len(w), 1))
    for j in range(w.shape[1]):
        num += w[:, j, None] * labels[:, j]
        den += w[:, j, None]
    return num / den


def knn_lumen_probability(db: RayDatabase, test_ray, k: Optional[int] = None, exclude_exact: bool = False) -> np.ndarray:
    """Kernel-weighted vote of the K nearest training labels at every radius."""
    k = db.k_neighbors if k is None else k
    idx, d2 = nearest_rays(db, test_ray, k, exclude_exact)
    return _weighted_labels(db, idx, d2)[0]


def lumen_probability_field(db: RayDatabase, intensities, k: Optional[int] = None, exclude_exact: bool = False) -> np.ndarray:
    """Data-driven probability for every ray of a ``(P, A, R)`` grid."""
    inten = np.asarray(intensities, dtype=float)
    k = db.k_neighbors if k is None else k
    rays = inten.reshape(-1, inten.shape[-1])
    idx, d2 = nearest_rays(db, rays, k, exclude_exact)
    return _weighted_labels(db, idx, d2).reshape(inten.shape)


def pve_probability(radii, estimated_radius: float) -> np.ndarray:
    if not estimated_radius > 0:
        raise DataError(f"estimated radius must be positive, got {estimated_radius}")
    return (np.asarray(radii, dtype=float) <= estimated_radius).astype(float)


@dataclass(frozen=True, eq=False)
class ProbabilityField:
    prob: np.ndarray  # (P, A, R) in [0, 1]
    source: np.ndarray  # (P, A, R) of SOURCE_* codes


def combine_probability(
    pr_d,
    pr_pv,
    pve_mask,
    calcium_mask=None,
    p_calcium: float = P_CALCIUM,
) -> ProbabilityField:
    """Per-vertex lumen probability.

    ``pr_pv`` is ``(P, R)`` (one radial step function per plane) and is used on
    planes where ``pve_mask`` is set; elsewhere the data term ``pr_d``
    (``(P, A, R)``) applies. Vertices in ``calcium_mask`` then get ``p_calcium``.
    """
    pr_d = np.asarray(pr_d, dtype=float)
    pve_mask = np.asarray(pve_mask, dtype=bool)
    if pve_mask.shape != pr_d.shape[:1]:
        raise LengthMismatch(f"pve mask has {pve_mask.shape}, expected ({pr_d.shape[0]},)")
    prob = pr_d.copy()
    source = np.zeros(pr_d.shape, dtype=np.uint8)
    if pve_mask.any():
        pr_pv = np.asarray(pr_pv, dtype=float)
        if pr_pv.shape != (pr_d.shape[0], pr_d.shape[2]):
            raise LengthMismatch(f"pve probability shape {pr_pv.shape} does not match grid {pr_d.shape}")
        prob[pve_mask] = pr_pv[pve_mask][:, None, :]
        source[pve_mask] = SOURCE_PVE
    if calcium_mask is not None:
        calcium_mask = np.asarray(calcium_mask, dtype=bool)
        if calcium_mask.shape != pr_d.shape:
            raise LengthMismatch(f"calcium mask shape {calcium_mask.shape} does not match {pr_d.shape}")
        prob[calcium_mask] = p_calcium
        source[calcium_mask] = SOURCE_CALCIUM
    return ProbabilityField(prob, source)
