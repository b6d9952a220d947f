"""Cylindrical graph energy, min-cut solve and lumen surface extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import maxflow
import numpy as np
from scipy.spatial import cKDTree

from .config import SegmentationConfig
from .core_io import Centerline, CylindricalGrid, ScalarVolume, warp_to_cylindrical
from .errors import DataError
from .likelihood import (
    RayDatabase,
    combine_probability,
    lumen_probability_field,
    pve_probability,
)
from .pve import RadiusModel, centerline_profile, detect_pve, plane_radius_estimates

logger = logging.getLogger(__name__)

PROB_EPS = 1e-6
SIGMA_C_MIN = 1e-6
SIGMA_C_FLOOR = 1.0


def unary_cost(prob) -> np.ndarray:
    """``(..., 2)`` costs ``(lumen, background)`` from lumen probabilities."""
    p = np.asarray(prob, dtype=float)
    lumen = -np.log(np.maximum(p, PROB_EPS))
    background = -np.log(np.maximum(1.0 - p, PROB_EPS))
    return np.stack([lumen, background], axis=-1)


def pairwise_weight(i_p, i_q, sigma_c, spatial_dist):
    """Smoothness weight between neighbouring samples.

    ``sigma_c`` is the intensity variance (HU^2) of the cross-section holding
    ``p``; values below ``SIGMA_C_MIN`` are replaced by ``SIGMA_C_FLOOR``.
    """
    sigma_c = np.asarray(sigma_c, dtype=float)
    sigma_c = np.where(sigma_c < SIGMA_C_MIN, SIGMA_C_FLOOR, sigma_c)
    diff = np.asarray(i_p, dtype=float) - np.asarray(i_q, dtype=float)
    d = np.asarray(spatial_dist, dtype=float)
    w = np.exp(-(diff * diff) / sigma_c) * np.exp(-(d * d))
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True, eq=False)
class SegmentationGraph:
    """Binary labeling problem: label 1 = lumen, 0 = background.

    ``star_outer[j]`` may only be lumen if ``star_inner[j]`` is lumen.
    """

    unary: np.ndarray  # (V, 2): cost of (lumen, background)
    edge_p: np.ndarray
    edge_q: np.ndarray
    edge_w: np.ndarray
    star_outer: np.ndarray
    star_inner: np.ndarray
    graph_lambda: float = 1.75
    shape: Optional[tuple] = None

    def __post_init__(self):
        if np.any(np.asarray(self.edge_w) < 0):
            raise DataError("pairwise weights must be non-negative")

    @property
    def n_vertices(self) -> int:
        return len(self.unary)


def graph_energy(graph: SegmentationGraph, labels) -> float:
    """Energy of a labeling; ``inf`` if it violates a star constraint."""
    x = np.asarray(labels, dtype=bool).ravel()
    if np.any(x[graph.star_outer] & ~x[graph.star_inner]):
        return float("inf")
    unary = np.where(x, graph.unary[:, 0], graph.unary[:, 1]).sum()
    cut = x[graph.edge_p] != x[graph.edge_q]
    return float(unary + graph.graph_lambda * graph.edge_w[cut].sum())


def _pairs(shape):
    P, A, R = shape
    idx = np.arange(P * A * R).reshape(shape)
    pairs = []
    if R > 1:
        pairs.append((idx[:, :, :-1], idx[:, :, 1:]))
    if A > 2:
        pairs.append((idx, np.roll(idx, -1, axis=1)))
    elif A == 2:
        pairs.append((idx[:, :1], idx[:, 1:]))
    if P > 1:
        pairs.append((idx[:-1], idx[1:]))
    if not pairs:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    p = np.concatenate([a.ravel() for a, _ in pairs])
    q = np.concatenate([b.ravel() for _, b in pairs])
    return p, q


def star_edges(shape):
    """(outer, inner) vertex pairs along every ray."""
    P, A, R = shape
    idx = np.arange(P * A * R).reshape(shape)
    return idx[:, :, 1:].ravel(), idx[:, :, :-1].ravel()


def build_graph(prob, grid: CylindricalGrid, graph_lambda: float = 1.75) -> SegmentationGraph:
    """6-connected graph (angle wraps around) over the cylindrical samples."""
    prob = np.asarray(prob, dtype=float)
    shape = grid.intensities.shape
    if prob.shape != shape:
        raise DataError(f"probability shape {prob.shape} does not match grid {shape}")
    inten = grid.intensities.ravel()
    pos = grid.positions().reshape(-1, 3)
    plane_var = grid.intensities.reshape(shape[0], -1).var(axis=1)
    p, q = _pairs(shape)
    # σ_c is taken from the plane of p, the lower-index end of each pair
    plane_of_p = p // (shape[1] * shape[2])
    dist = np.linalg.norm(pos[p] - pos[q], axis=1)
    w = pairwise_weight(inten[p], inten[q], plane_var[plane_of_p], dist)
    outer, inner = star_edges(shape)
    return SegmentationGraph(
        unary=unary_cost(prob.ravel()),
        edge_p=p,
        edge_q=q,
        edge_w=np.atleast_1d(w),
        star_outer=outer,
        star_inner=inner,
        graph_lambda=graph_lambda,
        shape=shape,
    )


def solve_min_cut(graph: SegmentationGraph):
    """Globally optimal star-feasible labeling via max-flow.

    Returns ``(labels, energy)``; ``labels`` is boolean (lumen) per vertex,
    reshaped to ``graph.shape`` when one is set.
    """
    n = graph.n_vertices
    lam_w = graph.graph_lambda * graph.edge_w
    finite_total = graph.unary.sum() + 2.0 * lam_w.sum()
    big = float(finite_total) + 1.0

    g = maxflow.Graph[float](n, len(lam_w) + len(graph.star_outer))
    nodes = g.add_nodes(n)
    # source side = lumen: a vertex cut from the source pays the background cost
    g.add_grid_tedges(nodes, graph.unary[:, 1], graph.unary[:, 0])
    if len(lam_w):
        g.add_edges(graph.edge_p, graph.edge_q, lam_w, lam_w)
    if len(graph.star_outer):
        g.add_edges(
            graph.star_outer,
            graph.star_inner,
            np.full(len(graph.star_outer), big),
            np.zeros(len(graph.star_outer)),
        )
    g.maxflow()
    labels = g.get_grid_segments(nodes) == 0
    energy = graph_energy(graph, labels)
    if graph.shape is not None:
        labels = labels.reshape(graph.shape)
    return labels, energy


@dataclass(frozen=True, eq=False)
class LumenSurface:
    """Boundary radius per (plane, angle) plus per-plane area and diameter."""

    r_star: np.ndarray  # (P, A) mm
    plane_center: np.ndarray
    plane_axes: np.ndarray
    plane_spacing: float
    radii_range: tuple = (0.1, 4.0)
    area: np.ndarray = field(init=False)
    effective_diameter: np.ndarray = field(init=False)

    def __post_init__(self):
        r = np.asarray(self.r_star, dtype=float)
        object.__setattr__(self, "r_star", r)
        object.__setattr__(self, "plane_center", np.asarray(self.plane_center, dtype=float))
        object.__setattr__(self, "plane_axes", np.asarray(self.plane_axes, dtype=float))
        object.__setattr__(self, "radii_range", tuple(float(v) for v in self.radii_range))
        area = cross_section_area(r)
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "effective_diameter", 2.0 * np.sqrt(area / np.pi))

    @property
    def n_planes(self) -> int:
        return self.r_star.shape[0]

    @property
    def n_angles(self) -> int:
        return self.r_star.shape[1]

    @property
    def plane_arc_length(self) -> np.ndarray:
        return np.arange(self.n_planes) * self.plane_spacing

    def directions(self) -> np.ndarray:
        th = 2.0 * np.pi * np.arange(self.n_angles) / self.n_angles
        u = self.plane_axes[:, 0, :][:, None, :]
        v = self.plane_axes[:, 1, :][:, None, :]
        return np.cos(th)[None, :, None] * u + np.sin(th)[None, :, None] * v

    def points(self) -> np.ndarray:
        """Contour points in mm, shape ``(P * A, 3)``."""
        pts = self.plane_center[:, None, :] + self.r_star[:, :, None] * self.directions()
        return pts.reshape(-1, 3)


def cross_section_area(r_star) -> np.ndarray:
    """Per-plane area ``sum(0.5 * r^2 * dtheta)`` over uniformly spaced angles."""
    r = np.asarray(r_star, dtype=float)
    dtheta = 2.0 * np.pi / r.shape[-1]
    return 0.5 * dtheta * np.sum(r * r, axis=-1)


def extract_surface(labels, grid: CylindricalGrid) -> LumenSurface:
    lab = np.asarray(labels, dtype=bool)
    radii = grid.radii
    n_lumen = np.cumprod(lab, axis=-1).sum(axis=-1)
    R = len(radii)
    inner = radii[np.clip(n_lumen - 1, 0, R - 1)]
    outer = radii[np.clip(n_lumen, 0, R - 1)]
    r_star = 0.5 * (inner + outer)
    r_star = np.where(n_lumen == 0, radii[0], r_star)
    saturated = n_lumen == R
    if saturated.any():
        logger.warning("%d rays are lumen up to the outermost radius; surface saturated", int(saturated.sum()))
    r_star = np.where(saturated, radii[-1], r_star)
    return LumenSurface(
        r_star=r_star,
        plane_center=grid.plane_center,
        plane_axes=grid.plane_axes,
        plane_spacing=grid.plane_spacing,
        radii_range=(radii[0], radii[-1]),
    )


def rasterize_surface(surface: LumenSurface, reference: ScalarVolume) -> np.ndarray:
    """Boolean lumen mask on the voxel grid of ``reference``.

    Each voxel is assigned to its nearest plane center and tested against that
    plane's contour (linear in angle). Voxels beyond the end planes are outside.
    """
    pos = reference.voxel_positions().reshape(-1, 3)
    reach = float(surface.r_star.max()) + surface.plane_spacing
    tree = cKDTree(surface.plane_center)
    dist, plane = tree.query(pos, distance_upper_bound=reach)
    mask = np.zeros(len(pos), dtype=bool)
    hit = np.isfinite(dist)
    if not hit.any():
        return mask.reshape(reference.dims)
    idx = np.flatnonzero(hit)
    pl = plane[idx]
    rel = pos[idx] - surface.plane_center[pl]
    u = surface.plane_axes[pl, 0]
    v = surface.plane_axes[pl, 1]
    t = np.cross(u, v)
    axial = np.einsum("ij,ij->i", rel, t)
    xu = np.einsum("ij,ij->i", rel, u)
    xv = np.einsum("ij,ij->i", rel, v)
    rho = np.hypot(xu, xv)
    theta = np.mod(np.arctan2(xv, xu), 2.0 * np.pi)
    A = surface.n_angles
    pos_a = theta / (2.0 * np.pi / A)
    a0 = np.floor(pos_a).astype(int) % A
    a1 = (a0 + 1) % A
    frac = pos_a - np.floor(pos_a)
    r_at = (1.0 - frac) * surface.r_star[pl, a0] + frac * surface.r_star[pl, a1]
    half = 0.5 * surface.plane_spacing + 1e-9
    end_plane = (pl == 0) & (axial < -half) | (pl == surface.n_planes - 1) & (axial > half)
    mask[idx] = (rho <= r_at) & ~end_plane
    return mask.reshape(reference.dims)


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    surface: LumenSurface
    labels: np.ndarray
    energy: float
    grid: CylindricalGrid
    profile: object = None
    profile_model: object = None
    radius_estimates: Optional[np.ndarray] = None
    pve_planes: Optional[np.ndarray] = None
    prob_source: Optional[np.ndarray] = None


def data_probability(grid: CylindricalGrid, raydb: RayDatabase, config: SegmentationConfig) -> np.ndarray:
    if len(raydb.radii) != len(grid.radii) or not np.allclose(raydb.radii, grid.radii, atol=1e-5):
        raise DataError("ray database radii do not match the segmentation grid radii")
    db = raydb
    if config.kernel_lambda is not None and config.kernel_lambda != raydb.kernel_lambda:
        db = RayDatabase(raydb.radii, raydb.intensity_rays, raydb.label_rays, config.kernel_lambda, raydb.k_neighbors, raydb.provenance)
    return lumen_probability_field(db, grid.intensities, k=config.k_neighbors)


def run_segmentation(
    vol: ScalarVolume,
    centerline: Centerline,
    raydb: RayDatabase,
    pve: bool,
    config: SegmentationConfig,
    radius_model: Optional[RadiusModel] = None,
    pr_d: Optional[np.ndarray] = None,
) -> SegmentationResult:
    """Warp, score, (optionally) apply the PVE override, cut and extract.

    ``pr_d`` may carry a precomputed data probability for the same inputs so
    paired PVE on/off runs share the KNN step.
    """
    gc = config.grid
    grid = warp_to_cylindrical(vol, centerline, gc.n_angles, gc.radii, gc.plane_spacing)
    if pr_d is None:
        pr_d = data_probability(grid, raydb, config)
    n_planes = grid.n_planes
    pve_planes = np.zeros(n_planes, dtype=bool)
    pr_pv = np.zeros((n_planes, len(grid.radii)))
    profile = model = r_est = None
    if pve:
        radius_model = radius_model or RadiusModel()
        profile = centerline_profile(vol, grid)
        model = detect_pve(profile)
        r_est = plane_radius_estimates(profile, model, radius_model)
        pve_planes = model.pve_mask & np.isfinite(r_est)
        for i in np.flatnonzero(pve_planes):
            pr_pv[i] = pve_probability(grid.radii, r_est[i])
    calcium = grid.intensities > config.calcium_threshold_hu
    field_ = combine_probability(pr_d, pr_pv, pve_planes, calcium, config.p_calcium)
    graph = build_graph(field_.prob, grid, config.graph_lambda)
    labels, energy = solve_min_cut(graph)
    surface = extract_surface(labels, grid)
    return SegmentationResult(
        surface=surface,
        labels=labels,
        energy=energy,
        grid=grid,
        profile=profile,
        profile_model=model,
        radius_estimates=r_est,
        pve_planes=pve_planes,
        prob_source=field_.source,
    )


def segment_branch(vol, centerline, raydb, pve: bool, config: SegmentationConfig, radius_model=None) -> LumenSurface:
    return run_segmentation(vol, centerline, raydb, pve, config, radius_model).surface

