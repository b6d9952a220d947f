"""Volume and centerline data model, trilinear sampling and cylindrical warping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateTangent, TopologyError

logger = logging.getLogger(__name__)

# Fraction of clamped samples above which warping logs a warning.
CLAMP_WARN_FRACTION = 0.01
# Centerlines are densified to this spacing (mm) on construction.
CENTERLINE_MAX_SPACING = 0.5


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """3D HU grid. ``values`` is indexed ``[x, y, z]``.

    Voxel ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing`` (mm).
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise DataError(f"volume must be 3D with all dims >= 1, got shape {values.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {spacing}")
        if len(origin) != 3:
            raise DataError(f"origin must have three values, got {origin}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.values.shape)

    def voxel_positions(self) -> np.ndarray:
        """Physical position of every voxel center, shape ``dims + (3,)``."""
        axes = [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack(grid, axis=-1)


def sample_points(vol: ScalarVolume, points) -> tuple[np.ndarray, int]:
    """Trilinear interpolation at an array of mm points (shape ``(..., 3)``).

    Points outside the grid are clamped to the nearest face. Returns the
    sampled values and the number of clamped points.
    """
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    dims = np.array(vol.dims)
    idx = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    upper = dims - 1
    outside = np.any((idx < 0) | (idx > upper), axis=1)
    idx = np.clip(idx, 0, upper)

    base = np.minimum(np.floor(idx).astype(np.int64), np.maximum(upper - 1, 0))
    frac = idx - base
    # single-voxel axes have no neighbour to interpolate towards
    frac[:, dims == 1] = 0.0
    nxt = np.minimum(base + 1, upper)

    data = vol.values
    out = np.zeros(len(pts))
    for cx in (0, 1):
        ix = nxt[:, 0] if cx else base[:, 0]
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        for cy in (0, 1):
            iy = nxt[:, 1] if cy else base[:, 1]
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            for cz in (0, 1):
                iz = nxt[:, 2] if cz else base[:, 2]
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                out += wx * wy * wz * data[ix, iy, iz]
    return out.reshape(shape), int(outside.sum())


def sample_trilinear(vol: ScalarVolume, p) -> float:
    """HU value at a single mm point."""
    values, _ = sample_points(vol, np.asarray(p, dtype=float)[None, :])
    return float(values[0])


@dataclass(frozen=True, eq=False)
class Centerline:
    """Ordered vessel-axis points (mm) starting at the ostium.

    Construction densifies the polyline so that no two consecutive points are
    more than ``CENTERLINE_MAX_SPACING`` apart.
    """

    points: np.ndarray
    arc_length: np.ndarray = field(init=False)
    ostium_index: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise DataError(f"centerline needs >= 2 points of shape (n, 3), got {pts.shape}")
        if self.ostium_index != 0:
            raise DataError(f"ostium_index must be 0, got {self.ostium_index}")
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(steps <= 0):
            bad = int(np.argmax(steps <= 0))
            raise DegenerateTangent(f"centerline points {bad} and {bad + 1} coincide")
        pts = _densify(pts, steps, CENTERLINE_MAX_SPACING)
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        pts.setflags(write=False)
        arc.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "arc_length", arc)

    @property
    def length(self) -> float:
        return float(self.arc_length[-1])

    def position(self, s) -> np.ndarray:
        """Linearly interpolated position(s) at arc-length ``s``."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return np.stack([np.interp(s, self.arc_length, self.points[:, a]) for a in range(3)], axis=-1)

    def tangent(self, s, half_window: float = CENTERLINE_MAX_SPACING) -> np.ndarray:
        """Unit tangent(s) from a central difference over ``±half_window``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        lo = np.clip(s - half_window, 0.0, self.length)
        hi = np.clip(s + half_window, 0.0, self.length)
        d = self.position(hi) - self.position(lo)
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        if np.any(norm <= 1e-12):
            raise DegenerateTangent("tangent is undefined at a requested arc-length")
        return d / norm


def _densify(pts: np.ndarray, steps: np.ndarray, max_spacing: float) -> np.ndarray:
    if np.all(steps <= max_spacing):
        return pts.copy()
    out = [pts[:1]]
    for a, b, step in zip(pts[:-1], pts[1:], steps):
        n = max(1, int(math.ceil(step / max_spacing - 1e-12)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


@dataclass(frozen=True, eq=False)
class CenterlineTree:
    """Branches of one coronary tree.

    ``parent[k]`` is ``None`` for the root branch, otherwise a pair
    ``(parent_branch_index, attachment_arc_length_mm)``.
    """

    branches: tuple
    parent: tuple
    tree_side: str = "left"

    def __post_init__(self):
        branches = tuple(self.branches)
        parent = tuple(None if p is None else (int(p[0]), float(p[1])) for p in self.parent)
        if not branches:
            raise TopologyError("centerline tree has no branches")
        if len(parent) != len(branches):
            raise TopologyError("parent list length differs from branch count")
        if self.tree_side not in ("left", "right"):
            raise TopologyError(f"tree_side must be 'left' or 'right', got {self.tree_side!r}")
        roots = [k for k, p in enumerate(parent) if p is None]
        if len(roots) != 1:
            raise TopologyError(f"expected exactly one root branch, found {len(roots)}")
        for k, p in enumerate(parent):
            if p is None:
                continue
            pk, s = p
            if not 0 <= pk < len(branches) or pk == k:
                raise TopologyError(f"branch {k} has dangling parent link {pk}")
            if not 0.0 <= s <= branches[pk].length + 1e-9:
                raise TopologyError(
                    f"branch {k} attaches at {s} mm, outside parent branch {pk} "
                    f"(length {branches[pk].length:.3f} mm)"
                )
        # every branch must reach the root without cycles
        for k in range(len(branches)):
            seen = set()
            j = k
            while parent[j] is not None:
                if j in seen:
                    raise TopologyError(f"cycle in parent links through branch {j}")
                seen.add(j)
                j = parent[j][0]
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "parent", parent)

    @property
    def root(self) -> int:
        return next(k for k, p in enumerate(self.parent) if p is None)

    def children(self, k: int) -> list:
        """``(child_index, attachment_arc_length)`` sorted by attachment position."""
        kids = [(j, p[1]) for j, p in enumerate(self.parent) if p is not None and p[0] == k]
        return sorted(kids, key=lambda c: (c[1], c[0]))


@dataclass(frozen=True, eq=False)
class CylindricalGrid:
    """Intensities resampled on (plane, angle, radius) around a centerline."""

    plane_spacing: float
    radii: np.ndarray
    intensities: np.ndarray  # (n_planes, n_angles, n_radii)
    plane_center: np.ndarray  # (n_planes, 3)
    plane_axes: np.ndarray  # (n_planes, 2, 3): in-plane unit vectors u, v

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=float)
        inten = np.asarray(self.intensities, dtype=float)
        if radii.ndim != 1 or len(radii) < 1 or radii[0] <= 0 or np.any(np.diff(radii) <= 0):
            raise DataError("radii must be strictly increasing and positive")
        if inten.ndim != 3 or inten.shape[2] != len(radii):
            raise DataError(f"intensity shape {inten.shape} does not match {len(radii)} radii")
        if not np.all(np.isfinite(inten)):
            raise DataError("cylindrical intensities must be finite")
        centers = np.asarray(self.plane_center, dtype=float)
        axes = np.asarray(self.plane_axes, dtype=float)
        if centers.shape != (inten.shape[0], 3) or axes.shape != (inten.shape[0], 2, 3):
            raise DataError("plane centers/axes do not match plane count")
        for arr in (radii, inten, centers, axes):
            arr.setflags(write=False)
        object.__setattr__(self, "plane_spacing", float(self.plane_spacing))
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "intensities", inten)
        object.__setattr__(self, "plane_center", centers)
        object.__setattr__(self, "plane_axes", axes)

    @property
    def n_planes(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_angles(self) -> int:
        return self.intensities.shape[1]

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_angles) / self.n_angles

    @property
    def plane_arc_length(self) -> np.ndarray:
        return np.arange(self.n_planes) * self.plane_spacing

    def directions(self) -> np.ndarray:
        """Unit in-plane direction per (plane, angle), shape ``(P, A, 3)``."""
        th = self.angles
        u = self.plane_axes[:, 0, :][:, None, :]
        v = self.plane_axes[:, 1, :][:, None, :]
        return np.cos(th)[None, :, None] * u + np.sin(th)[None, :, None] * v

    def positions(self) -> np.ndarray:
        """mm position of every sample, shape ``(P, A, R, 3)``."""
        d = self.directions()
        return self.plane_center[:, None, None, :] + self.radii[None, None, :, None] * d[:, :, None, :]


def default_radii(r_min: float = 0.1, r_max: float = 4.0, step: float = 0.1) -> np.ndarray:
    n = int(round((r_max - r_min) / step)) + 1
    return r_min + step * np.arange(n)


def transport_frames(tangents: np.ndarray) -> np.ndarray:
    """Minimal-rotation (parallel transport) frames along unit tangents.

    Returns ``(n, 2, 3)`` in-plane axes ``(u, v)`` with ``v = t x u``.
    """
    t0 = tangents[0]
    seed = np.eye(3)[int(np.argmin(np.abs(t0)))]
    u = seed - np.dot(seed, t0) * t0
    u /= np.linalg.norm(u)
    frames = np.empty((len(tangents), 2, 3))
    prev_t = t0
    for n, t in enumerate(tangents):
        if n:
            u = _rotate_between(prev_t, t, u)
        # re-orthonormalise against drift
        u = u - np.dot(u, t) * t
        u /= np.linalg.norm(u)
        frames[n, 0] = u
        frames[n, 1] = np.cross(t, u)
        prev_t = t
    return frames


def _rotate_between(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply the minimal rotation taking unit ``a`` onto unit ``b`` to ``x``."""
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if s < 1e-15:
        return x.copy()
    k = axis / s
    # Rodrigues
    return x * c + np.cross(k, x) * s + k * np.dot(k, x) * (1.0 - c)


def plane_count(length: float, plane_spacing: float) -> int:
    return int(math.floor(length / plane_spacing + 1e-9)) + 1


def warp_to_cylindrical(
    vol: ScalarVolume,
    cl: Centerline,
    n_angles: int = 32,
    radii: Optional[Sequence[float]] = None,
    plane_spacing: float = 0.5,
) -> CylindricalGrid:
    """Resample ``vol`` on planes orthogonal to ``cl`` every ``plane_spacing`` mm."""
    if plane_spacing <= 0:
        raise DataError("plane_spacing must be positive")
    if n_angles < 1:
        raise DataError("n_angles must be >= 1")
    radii = default_radii() if radii is None else np.asarray(radii, dtype=float)
    s = np.arange(plane_count(cl.length, plane_spacing)) * plane_spacing
    centers = cl.position(s)
    tangents = cl.tangent(s)
    axes = transport_frames(tangents)
    grid = CylindricalGrid(
        plane_spacing=plane_spacing,
        radii=radii,
        intensities=np.zeros((len(s), n_angles, len(radii))),
        plane_center=centers,
        plane_axes=axes,
    )
    values, clamped = sample_points(vol, grid.positions())
    total = values.size
    if clamped > CLAMP_WARN_FRACTION * total:
        logger.warning("%d of %d cylindrical samples fell outside the volume and were clamped", clamped, total)
    return CylindricalGrid(
        plane_spacing=plane_spacing,
        radii=radii,
        intensities=values,
        plane_center=centers,
        plane_axes=axes,
    )
