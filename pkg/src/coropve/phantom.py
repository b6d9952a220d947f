"""Straight vessel phantoms with stenoses, Gaussian PSF blur and FWHM sizing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core_io import Centerline, ScalarVolume
from .errors import NoPeak, SpecError

HU_MIN, HU_MAX = -32768, 32767
SUPERSAMPLE = 3
# Lateral extent kept around the vessel axis beyond the largest structure (mm).
LATERAL_MARGIN = 1.0
# Minimum lateral half-width so default cylindrical grids (r <= 4 mm) stay inside.
MIN_HALF_WIDTH = 5.0


@dataclass(frozen=True)
class PlaqueSegment:
    start: float
    end: float
    plaque_hu: float
    outer_radius: float


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and imaging parameters of a straight vessel along +z.

    ``radius_knots`` holds ``(arc_length_mm, radius_mm)`` pairs; the lumen
    radius is their piecewise-linear interpolant (held constant outside).
    """

    length: float
    radius_knots: tuple
    plaque_segments: tuple = ()
    lumen_hu: float = 400.0
    background_hu: float = 0.0
    psf_sigma: float = 0.6
    voxel_spacing: tuple = (0.4, 0.4, 0.4)
    noise_sigma: float = 0.0

    def __post_init__(self):
        knots = tuple((float(s), float(r)) for s, r in self.radius_knots)
        object.__setattr__(self, "radius_knots", knots)
        object.__setattr__(
            self,
            "plaque_segments",
            tuple(p if isinstance(p, PlaqueSegment) else PlaqueSegment(*p) for p in self.plaque_segments),
        )
        object.__setattr__(self, "voxel_spacing", tuple(float(v) for v in self.voxel_spacing))
        if self.length <= 0:
            raise SpecError("length must be positive")
        if not knots:
            raise SpecError("radius_profile needs at least one knot")
        s = np.array([k[0] for k in knots])
        if np.any(np.diff(s) <= 0):
            raise SpecError("radius_profile arc-lengths must be strictly increasing")
        if min(k[1] for k in knots) <= 0:
            raise SpecError("radius_profile must be > 0 everywhere")
        if self.psf_sigma < 0:
            raise SpecError("psf_sigma must be >= 0")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        if not self.lumen_hu > self.background_hu:
            raise SpecError("lumen_hu must exceed background_hu")
        if len(self.voxel_spacing) != 3 or min(self.voxel_spacing) <= 0:
            raise SpecError("voxel_spacing must be three positive values")
        for n, seg in enumerate(self.plaque_segments):
            if seg.end <= seg.start:
                raise SpecError(f"plaque segment {n}: end must exceed start")
            probe = np.concatenate([[seg.start, seg.end], s[(s > seg.start) & (s < seg.end)]])
            if seg.outer_radius < float(np.max(self.radius(probe))):
                raise SpecError(
                    f"plaque segment {n}: outer radius {seg.outer_radius} mm is below the local lumen radius"
                )

    def radius(self, s) -> np.ndarray:
        knots = np.asarray(self.radius_knots)
        return np.interp(s, knots[:, 0], knots[:, 1])

    @property
    def max_extent(self) -> float:
        r = max(k[1] for k in self.radius_knots)
        for seg in self.plaque_segments:
            r = max(r, seg.outer_radius)
        return r

    def to_dict(self) -> dict:
        return {
            "length_mm": self.length,
            "radius_profile": {
                "s_mm": [k[0] for k in self.radius_knots],
                "r_mm": [k[1] for k in self.radius_knots],
            },
            "plaque_segments": [
                {
                    "start_mm": p.start,
                    "end_mm": p.end,
                    "plaque_hu": p.plaque_hu,
                    "outer_radius_mm": p.outer_radius,
                }
                for p in self.plaque_segments
            ],
            "lumen_hu": self.lumen_hu,
            "background_hu": self.background_hu,
            "psf_sigma_mm": self.psf_sigma,
            "voxel_spacing_mm": list(self.voxel_spacing),
            "noise_sigma_hu": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        prof = d["radius_profile"]
        if len(prof["s_mm"]) != len(prof["r_mm"]):
            raise SpecError("radius_profile.s_mm and radius_profile.r_mm differ in length")
        return cls(
            length=float(d["length_mm"]),
            radius_knots=tuple(zip(prof["s_mm"], prof["r_mm"])),
            plaque_segments=tuple(
                PlaqueSegment(p["start_mm"], p["end_mm"], p["plaque_hu"], p["outer_radius_mm"])
                for p in d.get("plaque_segments", [])
            ),
            lumen_hu=float(d.get("lumen_hu", 400.0)),
            background_hu=float(d.get("background_hu", 0.0)),
            psf_sigma=float(d.get("psf_sigma_mm", 0.6)),
            voxel_spacing=tuple(d.get("voxel_spacing_mm", (0.4, 0.4, 0.4))),
            noise_sigma=float(d.get("noise_sigma_hu", 0.0)),
        )


def cylinder_spec(radius: float, length: float = 20.0, **kw) -> PhantomSpec:
    return PhantomSpec(length=length, radius_knots=((0.0, radius),), **kw)


def stenosis_spec(
    ref_radius: float,
    min_radius: float,
    length: float = 30.0,
    center: Optional[float] = None,
    width: float = 6.0,
    n_knots: int = 25,
    **kw,
) -> PhantomSpec:
    """Cosine-shaped narrowing from ``ref_radius`` down to ``min_radius`` over ``width`` mm."""
    center = length / 2 if center is None else center
    t = np.linspace(-0.5, 0.5, n_knots)
    s = center + t * width
    r = ref_radius - (ref_radius - min_radius) * 0.5 * (1.0 + np.cos(2.0 * np.pi * t))
    knots = [(0.0, ref_radius)] + [(float(a), float(b)) for a, b in zip(s, r)] + [(length, ref_radius)]
    knots = [k for n, k in enumerate(knots) if n == 0 or k[0] > knots[n - 1][0]]
    return PhantomSpec(length=length, radius_knots=tuple(knots), **kw)


@dataclass(frozen=True, eq=False)
class PhantomTruth:
    volume: ScalarVolume
    ideal_volume: ScalarVolume
    lumen_mask: ScalarVolume
    centerline: Centerline
    spec: PhantomSpec = field(repr=False)

    def radius(self, s) -> np.ndarray:
        return self.spec.radius(s)


def _to_hu(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), HU_MIN, HU_MAX).astype(np.int16)


def _lateral_axis(half_width: float, spacing: float) -> np.ndarray:
    n = int(math.ceil(half_width / spacing - 1e-9))
    return np.arange(-n, n + 1) * spacing


def generate_phantom(spec: PhantomSpec, seed: int = 0, quantize: bool = True) -> PhantomTruth:
    """Rasterize, blur and optionally add noise to the phantom in ``spec``.

    The vessel axis runs along +z through ``x = y = 0`` (a voxel center).
    With ``quantize`` (the default, and what the volume format stores) the
    HU values are rounded to int16; otherwise the float fields are kept.
    """
    dx, dy, dz = spec.voxel_spacing
    half = max(MIN_HALF_WIDTH, spec.max_extent + LATERAL_MARGIN)
    xs = _lateral_axis(half, dx)
    ys = _lateral_axis(half, dy)
    nz = int(round(spec.length / dz)) + 1
    zs = np.arange(nz) * dz
    origin = (float(xs[0]), float(ys[0]), 0.0)

    offsets = (np.arange(SUPERSAMPLE) - (SUPERSAMPLE - 1) / 2) / SUPERSAMPLE
    ideal = np.zeros((len(xs), len(ys), nz))
    for ox in offsets:
        x = xs + ox * dx
        for oy in offsets:
            y = ys + oy * dy
            rho = np.hypot(x[:, None], y[None, :])[:, :, None]
            for oz in offsets:
                z = zs + oz * dz
                ideal += _material(spec, rho, z[None, None, :])
    ideal /= SUPERSAMPLE**3

    if spec.psf_sigma > 0:
        sigma_vox = [spec.psf_sigma / d for d in spec.voxel_spacing]
        blurred = ndimage.gaussian_filter(ideal, sigma=sigma_vox, mode="mirror")
    else:
        blurred = ideal.copy()
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        blurred = blurred + rng.normal(0.0, spec.noise_sigma, size=blurred.shape)

    rho_c = np.hypot(xs[:, None], ys[None, :])[:, :, None]
    mask = (rho_c <= spec.radius(zs)[None, None, :]).astype(np.int16)

    spacing = spec.voxel_spacing
    cl_z = np.append(np.arange(0.0, spec.length, 0.5), spec.length)
    cl_z = cl_z[np.concatenate([np.diff(cl_z) > 1e-9, [True]])]
    centerline = Centerline(np.stack([np.zeros_like(cl_z), np.zeros_like(cl_z), cl_z], axis=1))
    return PhantomTruth(
        volume=ScalarVolume(_to_hu(blurred) if quantize else blurred, spacing, origin),
        ideal_volume=ScalarVolume(_to_hu(ideal) if quantize else ideal, spacing, origin),
        lumen_mask=ScalarVolume(mask, spacing, origin),
        centerline=centerline,
        spec=spec,
    )


def _material(spec: PhantomSpec, rho: np.ndarray, z: np.ndarray) -> np.ndarray:
    r_lumen = spec.radius(z)
    out = np.where(rho <= r_lumen, spec.lumen_hu, spec.background_hu).astype(float)
    for seg in spec.plaque_segments:
        in_plaque = (z >= seg.start) & (z <= seg.end) & (rho > r_lumen) & (rho <= seg.outer_radius)
        out = np.where(in_plaque, seg.plaque_hu, out)
    return out


def blurred_disk_section(
    radius: float,
    lumen_hu: float,
    background_hu: float,
    psf_sigma: float,
    pixel: Optional[float] = None,
) -> tuple[np.ndarray, float]:
    """Fine 2D cross-section of an infinite cylinder after Gaussian blur.

    An infinite straight cylinder blurred by an isotropic 3D Gaussian equals
    its 2D cross-section blurred by the 2D Gaussian. Returns the image
    (centered on a pixel) and its pixel size in mm.
    """
    if pixel is None:
        pixel = min(0.02, psf_sigma / 10.0) if psf_sigma > 0 else 0.02
    half = radius + 6.0 * psf_sigma + 2.0 * pixel
    ax = _lateral_axis(half, pixel)
    img = np.zeros((len(ax), len(ax)))
    offsets = (np.arange(SUPERSAMPLE) - (SUPERSAMPLE - 1) / 2) / SUPERSAMPLE
    for ox in offsets:
        for oy in offsets:
            rho = np.hypot(ax[:, None] + ox * pixel, ax[None, :] + oy * pixel)
            img += np.where(rho <= radius, lumen_hu, background_hu)
    img /= SUPERSAMPLE**2
    if psf_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=psf_sigma / pixel, mode="mirror", truncate=6.0)
    return img, pixel


def blurred_cylinder_profile(radius, lumen_hu, background_hu, psf_sigma, pixel=None):
    """Central line profile through a blurred cylinder: (positions mm, HU)."""
    img, pixel = blurred_disk_section(radius, lumen_hu, background_hu, psf_sigma, pixel)
    c = img.shape[0] // 2
    pos = (np.arange(img.shape[0]) - c) * pixel
    return pos, img[:, c].copy()


def fwhm_radius(profile, spacing: float, background_hu: float) -> float:
    """Half the full width at half maximum of a 1D profile, in mm."""
    prof = np.asarray(profile, dtype=float)
    peak = int(np.argmax(prof))
    top = prof[peak]
    if top <= background_hu:
        raise NoPeak(f"profile maximum {top} HU does not exceed background {background_hu} HU")
    half = 0.5 * (top + background_hu)

    def crossing(step: int) -> float:
        j = peak
        while 0 <= j + step < len(prof) and prof[j + step] > half:
            j += step
        k = j + step
        if not 0 <= k < len(prof):
            return float(j)
        # linear interpolation between j (above) and k (at/below)
        t = (prof[j] - half) / (prof[j] - prof[k])
        return j + step * t

    width = (crossing(+1) - crossing(-1)) * spacing
    return 0.5 * width


def hu_reduction_curve(diameters, lumen_hu: float, background_hu: float, psf_sigma: float) -> list:
    """``(diameter, reduction)`` pairs, reduction ``= 1 - HU_center / lumen_hu``."""
    out = []
    for d in diameters:
        d = float(d)
        if d <= 0:
            raise SpecError("diameters must be positive")
        img, _ = blurred_disk_section(d / 2.0, lumen_hu, background_hu, psf_sigma)
        c = img.shape[0] // 2
        out.append((d, 1.0 - img[c, c] / lumen_hu))
    return out
