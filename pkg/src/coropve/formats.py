"""On-disk formats. Every writer goes through an atomic temp-file + rename.

Volumes: ``<name>.vol.json`` sidecar + ``<name>.raw`` little-endian int16,
x varying fastest. Cylindrical grids: ``<name>.cyl.json`` + ``<name>.raw``
little-endian float64 in (plane, angle, radius) order. Ray databases: the
``CRAYDB1`` binary layout with a JSON footer.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core_io import Centerline, CenterlineTree, CylindricalGrid, ScalarVolume
from .errors import FormatError
from .graphcut import LumenSurface
from .likelihood import RayDatabase
from .phantom import PhantomSpec, PhantomTruth
from .pve import RadiusModel

RAYDB_MAGIC = b"CRAYDB1\0"


# -- plumbing ---------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not valid UTF-8 JSON ({exc})") from exc


def _get(d, key, where: str):
    if not isinstance(d, dict) or key not in d:
        raise FormatError(f"{where}: missing field '{key}'")
    return d[key]


def _array(value, where: str, shape_tail=None, dtype=float) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: not a numeric array ({exc})") from exc
    if shape_tail is not None and (arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != tuple(shape_tail)):
        raise FormatError(f"{where}: expected shape (n, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    return arr


def _raw_path(json_path: Path, suffix: str) -> Path:
    name = json_path.name
    stem = name[: -len(suffix)] if name.endswith(suffix) else json_path.stem
    return json_path.with_name(stem + ".raw")


def _read_raw(path: Path, count: int, dtype: str, where: str) -> np.ndarray:
    expected = count * np.dtype(dtype).itemsize
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{where}: data file {path} not found") from exc
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).copy()


# -- volumes ------------------------------------------------------------------

def save_volume(vol: ScalarVolume, path) -> Path:
    path = Path(path)
    raw = _raw_path(path, ".vol.json")
    values = np.asarray(vol.values)
    rounded = np.rint(values)
    if np.any(rounded != values) or values.min() < -32768 or values.max() > 32767:
        raise FormatError(f"{path}: volume values must be integers in the signed 16-bit range")
    atomic_write_bytes(raw, rounded.astype("<i2").transpose(2, 1, 0).tobytes())
    write_json(
        path,
        {
            "dims": list(vol.dims),
            "spacing_mm": list(vol.spacing),
            "origin_mm": list(vol.origin),
            "dtype": "int16",
            "data": raw.name,
        },
    )
    return path


def load_volume(path) -> ScalarVolume:
    path = Path(path)
    meta = read_json(path)
    dims = [int(v) for v in _get(meta, "dims", str(path))]
    spacing = _get(meta, "spacing_mm", str(path))
    origin = _get(meta, "origin_mm", str(path))
    dtype = _get(meta, "dtype", str(path))
    if dtype != "int16":
        raise FormatError(f"{path}: field 'dtype' must be 'int16', got {dtype!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{path}: field 'dims' must hold three positive integers")
    raw = path.with_name(_get(meta, "data", str(path)))
    flat = _read_raw(raw, dims[0] * dims[1] * dims[2], "<i2", str(path))
    values = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0).astype(np.int16)
    return ScalarVolume(np.ascontiguousarray(values), tuple(spacing), tuple(origin))


# -- centerlines ----------------------------------------------------------------

def centerline_tree_to_dict(tree: CenterlineTree) -> dict:
    branches = []
    for cl, parent in zip(tree.branches, tree.parent):
        branches.append(
            {
                "points_mm": cl.points,
                "ostium_index": cl.ostium_index,
                "parent": None if parent is None else {"branch": parent[0], "arc_length_mm": parent[1]},
            }
        )
    return {"tree_side": tree.tree_side, "branches": branches}


def save_centerline_tree(tree: CenterlineTree, path) -> Path:
    write_json(path, centerline_tree_to_dict(tree))
    return Path(path)


def load_centerline_tree(path) -> CenterlineTree:
    path = Path(path)
    d = read_json(path)
    side = _get(d, "tree_side", str(path))
    raw_branches = _get(d, "branches", str(path))
    if not isinstance(raw_branches, list) or not raw_branches:
        raise FormatError(f"{path}: field 'branches' must be a non-empty list")
    branches, parents = [], []
    for k, b in enumerate(raw_branches):
        where = f"{path}: branches[{k}]"
        pts = _array(_get(b, "points_mm", where), f"{where}.points_mm", (3,))
        ostium = _get(b, "ostium_index", where)
        if ostium != 0:
            raise FormatError(f"{where}.ostium_index must be 0, got {ostium}")
        parent = _get(b, "parent", where)
        if parent is not None:
            parent = (int(_get(parent, "branch", f"{where}.parent")), float(_get(parent, "arc_length_mm", f"{where}.parent")))
        branches.append(Centerline(pts))
        parents.append(parent)
    return CenterlineTree(tuple(branches), tuple(parents), side)


def single_branch_tree(cl: Centerline, side: str = "left") -> CenterlineTree:
    return CenterlineTree((cl,), (None,), side)


# -- cylindrical grids ------------------------------------------------------------

def save_grid(grid: CylindricalGrid, path) -> Path:
    path = Path(path)
    raw = _raw_path(path, ".cyl.json")
    atomic_write_bytes(raw, np.ascontiguousarray(grid.intensities, dtype="<f8").tobytes())
    write_json(
        path,
        {
            "n_planes": grid.n_planes,
            "plane_spacing_mm": grid.plane_spacing,
            "n_angles": grid.n_angles,
            "radii_mm": grid.radii,
            "plane_center_mm": grid.plane_center,
            "plane_axes": grid.plane_axes,
            "dtype": "float64",
            "data": raw.name,
        },
    )
    return path


def load_grid(path) -> CylindricalGrid:
    path = Path(path)
    d = read_json(path)
    w = str(path)
    n_planes = int(_get(d, "n_planes", w))
    n_angles = int(_get(d, "n_angles", w))
    radii = _array(_get(d, "radii_mm", w), f"{w}.radii_mm")
    if _get(d, "dtype", w) != "float64":
        raise FormatError(f"{w}: field 'dtype' must be 'float64'")
    raw = path.with_name(_get(d, "data", w))
    flat = _read_raw(raw, n_planes * n_angles * len(radii), "<f8", w)
    return CylindricalGrid(
        plane_spacing=float(_get(d, "plane_spacing_mm", w)),
        radii=radii,
        intensities=flat.reshape(n_planes, n_angles, len(radii)),
        plane_center=_array(_get(d, "plane_center_mm", w), f"{w}.plane_center_mm", (3,)),
        plane_axes=_array(_get(d, "plane_axes", w), f"{w}.plane_axes", (2, 3)),
    )


# -- ray database ------------------------------------------------------------------

def raydb_to_bytes(db: RayDatabase) -> bytes:
    buf = io.BytesIO()
    buf.write(RAYDB_MAGIC)
    buf.write(struct.pack("<II", db.n_rays, db.n_radii))
    buf.write(np.asarray(db.radii, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(db.intensity_rays, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(db.label_rays, dtype=np.uint8).tobytes())
    footer = {"kernel_lambda": db.kernel_lambda, "k_neighbors": db.k_neighbors, "provenance": db.provenance}
    buf.write(json.dumps(_plain(footer), sort_keys=True).encode("utf-8"))
    return buf.getvalue()


def save_raydb(db: RayDatabase, path) -> Path:
    atomic_write_bytes(path, raydb_to_bytes(db))
    return Path(path)


def load_raydb(path) -> RayDatabase:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != RAYDB_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 (expected CRAYDB1\\0)")
    n_rays, n_radii = struct.unpack_from("<II", data, 8)
    offset = 16
    need = offset + 4 * n_radii + 4 * n_rays * n_radii + n_rays * n_radii
    if len(data) < need:
        raise FormatError(f"{path}: expected at least {need} bytes for {n_rays} rays x {n_radii} radii, found {len(data)}")
    radii = np.frombuffer(data, "<f4", n_radii, offset)
    offset += 4 * n_radii
    inten = np.frombuffer(data, "<f4", n_rays * n_radii, offset).reshape(n_rays, n_radii)
    offset += 4 * n_rays * n_radii
    labels = np.frombuffer(data, np.uint8, n_rays * n_radii, offset).reshape(n_rays, n_radii)
    offset += n_rays * n_radii
    try:
        footer = json.loads(data[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed JSON footer at byte {offset} ({exc})") from exc
    where = f"{path}: footer"
    return RayDatabase(
        radii=radii.copy(),
        intensity_rays=inten.copy(),
        label_rays=labels.copy(),
        kernel_lambda=float(_get(footer, "kernel_lambda", where)),
        k_neighbors=int(_get(footer, "k_neighbors", where)),
        provenance=footer.get("provenance", {}),
    )


# -- surfaces ------------------------------------------------------------------------

def surface_to_dict(surface: LumenSurface, config: dict | None = None) -> dict:
    planes = []
    for i in range(surface.n_planes):
        planes.append(
            {
                "index": i,
                "center_mm": surface.plane_center[i],
                "axes": surface.plane_axes[i],
                "area_mm2": surface.area[i],
                "effective_diameter_mm": surface.effective_diameter[i],
                "r_star_mm": surface.r_star[i],
            }
        )
    return {
        "plane_spacing_mm": surface.plane_spacing,
        "n_angles": surface.n_angles,
        "radii_range_mm": list(surface.radii_range),
        "planes": planes,
        "config": config or {},
    }


def save_surface(surface: LumenSurface, path, config: dict | None = None) -> Path:
    write_json(path, surface_to_dict(surface, config))
    return Path(path)


def load_surface(path) -> LumenSurface:
    path = Path(path)
    d = read_json(path)
    w = str(path)
    planes = _get(d, "planes", w)
    if not planes:
        raise FormatError(f"{w}: field 'planes' is empty")
    r_star = _array([_get(p, "r_star_mm", f"{w}: planes[{k}]") for k, p in enumerate(planes)], f"{w}.r_star_mm")
    centers = _array([_get(p, "center_mm", f"{w}: planes[{k}]") for k, p in enumerate(planes)], f"{w}.center_mm", (3,))
    axes = _array([_get(p, "axes", f"{w}: planes[{k}]") for k, p in enumerate(planes)], f"{w}.axes", (2, 3))
    return LumenSurface(
        r_star=r_star,
        plane_center=centers,
        plane_axes=axes,
        plane_spacing=float(_get(d, "plane_spacing_mm", w)),
        radii_range=tuple(d.get("radii_range_mm", (0.1, 4.0))),
    )


# -- models and tables -----------------------------------------------------------------

def save_radius_model(model: RadiusModel, path, extra: dict | None = None) -> Path:
    d = model.to_dict()
    if extra:
        d.update(extra)
    write_json(path, d)
    return Path(path)


def load_radius_model(path) -> RadiusModel:
    path = Path(path)
    d = read_json(path)
    return RadiusModel(float(_get(d, "alpha_mm", str(path))), float(_get(d, "beta_mm", str(path))))


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def _csv_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_profile_csv(path, profile, model) -> None:
    expected = model.expected(profile.arc_length)
    rows = zip(profile.arc_length, profile.intensity, expected, model.pve_mask.astype(int))
    write_csv(path, ["arc_length_mm", "intensity_hu", "model_hu", "pve_flag"], rows)


# -- phantom cases ------------------------------------------------------------------------

def load_phantom_spec(path) -> PhantomSpec:
    path = Path(path)
    d = read_json(path)
    try:
        return PhantomSpec.from_dict(d)
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc


def save_phantom_case(truth: PhantomTruth, out_dir, seed: int, extra: dict | None = None) -> Path:
    """Write a phantom case directory (volumes, centerline, truth record)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(truth.volume, out / "volume.vol.json")
    save_volume(truth.ideal_volume, out / "ideal.vol.json")
    save_volume(truth.lumen_mask, out / "mask.vol.json")
    save_centerline_tree(single_branch_tree(truth.centerline), out / "centerline.cl.json")
    write_json(out / "phantom-spec.json", truth.spec.to_dict())
    record = {
        "seed": seed,
        "spec": truth.spec.to_dict(),
        "radius_profile": {
            "s_mm": [k[0] for k in truth.spec.radius_knots],
            "r_mm": [k[1] for k in truth.spec.radius_knots],
        },
        "mask": "mask.vol.json",
        "volume": "volume.vol.json",
        "ideal_volume": "ideal.vol.json",
        "centerline": "centerline.cl.json",
    }
    if extra:
        record.update(extra)
    write_json(out / "case.truth.json", record)
    return out


def load_phantom_case(case_dir) -> PhantomTruth:
    case_dir = Path(case_dir)
    truth_path = case_dir / "case.truth.json"
    if not truth_path.exists():
        raise FormatError(f"{case_dir}: no case.truth.json (not a phantom case directory)")
    rec = read_json(truth_path)
    spec = PhantomSpec.from_dict(_get(rec, "spec", str(truth_path)))
    tree = load_centerline_tree(case_dir / _get(rec, "centerline", str(truth_path)))
    return PhantomTruth(
        volume=load_volume(case_dir / _get(rec, "volume", str(truth_path))),
        ideal_volume=load_volume(case_dir / _get(rec, "ideal_volume", str(truth_path))),
        lumen_mask=load_volume(case_dir / _get(rec, "mask", str(truth_path))),
        centerline=tree.branches[0],
        spec=spec,
    )
