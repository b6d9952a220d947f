"""Batch orchestration shared by the command line: training, per-case runs, sweeps."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import PipelineConfig
from .core_io import warp_to_cylindrical
from .flowsim import build_network, calibrate_outlet_scale, solve_flow, tree_from_surfaces
from .formats import (
    dumps,
    load_phantom_case,
    single_branch_tree,
    surface_to_dict,
    write_csv,
    write_json,
    atomic_write_text,
    csv_text,
    write_profile_csv,
    save_raydb,
    save_radius_model,
)
from .graphcut import LumenSurface, data_probability, rasterize_surface, run_segmentation
from .likelihood import RayDatabase, build_ray_database
from .metrics import dice, surface_distances
from .phantom import PhantomTruth, cylinder_spec, generate_phantom, hu_reduction_curve, stenosis_spec
from .pve import RadiusModel, calibrate_radius_model

logger = logging.getLogger(__name__)

JOBS_ENV = "COROPVE_JOBS"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def provenance(config: PipelineConfig) -> dict:
    return {"tool": "coropve", "version": __version__, "config": config.to_dict()}


def csv_header_comment(config: PipelineConfig) -> str:
    import json

    return "# " + json.dumps({"tool": "coropve", "version": __version__, "config": config.to_dict()}, separators=(",", ":")) + "\n"


def write_echoed_csv(path, header, rows, config: PipelineConfig) -> None:
    atomic_write_text(path, csv_header_comment(config) + csv_text(header, rows))


# -- training --------------------------------------------------------------------

def training_phantoms(config: PipelineConfig) -> list:
    tc = config.training
    vox = (tc.voxel_spacing_mm,) * 3
    return [
        generate_phantom(
            cylinder_spec(
                r,
                length=tc.length_mm,
                lumen_hu=tc.lumen_hu,
                background_hu=tc.background_hu,
                psf_sigma=tc.psf_sigma_mm,
                voxel_spacing=vox,
                noise_sigma=tc.noise_sigma_hu,
            ),
            seed=config.seed + n,
        )
        for n, r in enumerate(tc.radii_mm)
    ]


def build_training_database(config: PipelineConfig, phantoms=None) -> RayDatabase:
    sc = config.segmentation
    phantoms = training_phantoms(config) if phantoms is None else phantoms
    return build_ray_database(
        phantoms,
        n_angles=sc.grid.n_angles,
        radii=sc.grid.radii,
        plane_spacing=sc.grid.plane_spacing,
        kernel_lambda=sc.kernel_lambda,
        k_neighbors=sc.k_neighbors,
    )


def calibrate_from_config(config: PipelineConfig, psf_sigma: Optional[float] = None):
    tc = config.training
    psf = tc.psf_sigma_mm if psf_sigma is None else psf_sigma
    curve = hu_reduction_curve(tc.calibration_diameters_mm, tc.lumen_hu, tc.background_hu, psf)
    return calibrate_radius_model(curve), curve


@dataclass
class Models:
    raydb: RayDatabase
    radius_model: RadiusModel
    outlet_scale: float
    curve: list


def prepare_models(config: PipelineConfig) -> Models:
    radius_model, curve = calibrate_from_config(config)
    flow = config.flow
    scale = flow.outlet_scale if flow.outlet_scale is not None else calibrate_outlet_scale(flow)
    return Models(build_training_database(config), radius_model, scale, curve)


# -- stenosis suite ------------------------------------------------------------------

def stenosis_suite(min_radii=(0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7), ref_radius: float = 1.5, length: float = 30.0, **kw) -> dict:
    """Named phantom specs with sub-resolution narrowings."""
    return {
        f"sten_{int(round(r * 100)):03d}": stenosis_spec(ref_radius, r, length=length, **kw) for r in min_radii
    }


# -- per-case evaluation --------------------------------------------------------------

def truth_surface(truth: PhantomTruth, like: LumenSurface) -> LumenSurface:
    """Exact lumen contour sampled on the planes and angles of ``like``."""
    r = truth.radius(like.plane_arc_length)
    return LumenSurface(
        r_star=np.repeat(r[:, None], like.n_angles, axis=1),
        plane_center=like.plane_center,
        plane_axes=like.plane_axes,
        plane_spacing=like.plane_spacing,
        radii_range=(float(r.min()), float(r.max())),
    )


def simulate_ffr(surface: LumenSurface, truth: PhantomTruth, config: PipelineConfig, outlet_scale: float):
    tree = tree_from_surfaces([surface], single_branch_tree(truth.centerline))
    net = build_network(tree, config.flow, outlet_scale)
    result = solve_flow(net)
    return tree, net, result


def ffr_record(tree, net, result, config: PipelineConfig) -> dict:
    outlets = []
    for node, d, r in zip(net.outlet_nodes, net.outlet_diameter, net.outlet_resistance):
        outlets.append(
            {
                "node": int(node),
                "diameter_mm": float(d),
                "resistance_mmhg_s_per_ml": float(r),
                "pressure_mmhg": float(result.node_pressures[node]),
                "ffr": result.ffr_at_node(int(node)),
            }
        )
    segments = []
    for k, seg in enumerate(tree.segments):
        segments.append(
            {
                "segment": k,
                "branch": seg.branch,
                "start_mm": seg.branch_offset,
                "length_mm": seg.length,
                "min_diameter_mm": float(seg.diameter.min()),
                "r_lin_mmhg_s_per_ml": float(net.r_lin[k]),
                "r_quad_mmhg_s2_per_ml2": float(net.r_quad[k]),
                "flow_ml_s": float(result.edge_flows[k]),
                "distal_ffr": result.ffr_at_node(seg.child_node),
            }
        )
    return {
        "tree_side": tree.tree_side,
        "ostial_pressure_mmhg": result.ostial_pressure,
        "outlets": outlets,
        "segments": segments,
        "node_pressures_mmhg": result.node_pressures,
        "edge_flows_ml_s": result.edge_flows,
        "min_ffr": min(o["ffr"] for o in outlets),
        "solver": {"iterations": result.iterations, "residual_ml_s": result.solver_residual},
    }


@dataclass
class ModeResult:
    surface: LumenSurface
    dice: float
    msd: float
    maxsd: float
    min_diameter: float
    ffr: float
    ffr_record: dict
    n_pve_planes: int
    profile: object = None
    profile_model: object = None


@dataclass
class CaseResult:
    case_id: str
    modes: dict  # "on"/"off" -> ModeResult
    truth_ffr: float
    truth_min_diameter: float


def evaluate_case(case_id: str, truth: PhantomTruth, models: Models, config: PipelineConfig, modes=("on", "off")) -> CaseResult:
    sc = config.segmentation
    gc = sc.grid
    grid = warp_to_cylindrical(truth.volume, truth.centerline, gc.n_angles, gc.radii, gc.plane_spacing)
    pr_d = data_probability(grid, models.raydb, sc)
    truth_mask = np.asarray(truth.lumen_mask.values, dtype=bool)
    out = {}
    ref_surface = None
    for mode in modes:
        seg = run_segmentation(truth.volume, truth.centerline, models.raydb, mode == "on", sc, models.radius_model, pr_d=pr_d)
        surface = seg.surface
        ref_surface = surface
        mask = rasterize_surface(surface, truth.lumen_mask)
        msd, maxsd = surface_distances(surface.points(), truth_surface(truth, surface).points())
        tree, net, flow = simulate_ffr(surface, truth, config, models.outlet_scale)
        rec = ffr_record(tree, net, flow, config)
        out[mode] = ModeResult(
            surface=surface,
            dice=dice(mask, truth_mask),
            msd=msd,
            maxsd=maxsd,
            min_diameter=float(surface.effective_diameter.min()),
            ffr=rec["min_ffr"],
            ffr_record=rec,
            n_pve_planes=int(seg.pve_planes.sum()),
            profile=seg.profile,
            profile_model=seg.profile_model,
        )
    t_surface = truth_surface(truth, ref_surface)
    tree, net, flow = simulate_ffr(t_surface, truth, config, models.outlet_scale)
    truth_ffr = ffr_record(tree, net, flow, config)["min_ffr"]
    return CaseResult(case_id, out, truth_ffr, float(t_surface.effective_diameter.min()))


# -- batch runs ------------------------------------------------------------------------

def list_cases(cases_dir) -> list:
    root = Path(cases_dir)
    if (root / "case.truth.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "case.truth.json").exists())


def _case_worker(args):
    case_dir, models, config, modes = args
    truth = load_phantom_case(case_dir)
    return evaluate_case(Path(case_dir).name, truth, models, config, modes)


def evaluate_cases(case_dirs, models: Models, config: PipelineConfig, jobs: int = 1, modes=("on", "off")) -> list:
    tasks = [(str(c), models, config, modes) for c in case_dirs]
    if jobs <= 1 or len(tasks) <= 1:
        return [_case_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_case_worker, tasks))


def write_case_outputs(res: CaseResult, out_dir: Path, config: PipelineConfig) -> None:
    from .plots import profile_svg

    echo = provenance(config)
    ffr_doc = {"case_id": res.case_id, "reference_ffr": res.truth_ffr, "trees": {}, **echo}
    for mode, mr in res.modes.items():
        write_json(out_dir / f"{res.case_id}.pve_{mode}.surface.json", surface_to_dict(mr.surface, {**echo, "pve": mode}))
        ffr_doc["trees"][f"pve_{mode}"] = mr.ffr_record
        if mr.profile is not None:
            write_profile_csv(out_dir / f"{res.case_id}.profile.csv", mr.profile, mr.profile_model)
            atomic_write_text(out_dir / f"{res.case_id}.profile.svg", profile_svg(mr.profile, mr.profile_model, title=res.case_id))
    write_json(out_dir / f"{res.case_id}.ffr.json", ffr_doc)


METRICS_HEADER = ["case_id", "pve", "dice", "msd_mm", "maxsd_mm", "min_diameter_mm", "ffr", "n_pve_planes"]


def metrics_rows(results) -> list:
    rows = []
    for res in results:
        for mode in sorted(res.modes):
            mr = res.modes[mode]
            rows.append([res.case_id, mode, mr.dice, mr.msd, mr.maxsd, mr.min_diameter, mr.ffr, mr.n_pve_planes])
    return rows


def paired_rows(results, threshold: float) -> list:
    """``case_id, score_pve_on, score_pve_off, invasive_label`` with the truth-geometry FFR as reference."""
    return [
        [r.case_id, r.modes["on"].ffr, r.modes["off"].ffr, int(r.truth_ffr <= threshold), r.truth_ffr]
        for r in results
    ]


def run_pipeline(config: PipelineConfig, cases_dir, out_dir, jobs: int = 1) -> list:
    from .stats_report import roc_report

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = prepare_models(config)
    write_json(out / "config.json", provenance(config))
    save_radius_model(
        models.radius_model,
        out / "pve-model.json",
        {"calibration_curve": [{"diameter_mm": d, "reduction": r} for d, r in models.curve], **provenance(config)},
    )
    save_raydb(models.raydb, out / "train.raydb")
    results = evaluate_cases(list_cases(cases_dir), models, config, jobs)
    for res in results:
        write_case_outputs(res, out, config)
    write_echoed_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows(results), config)
    threshold = config.flow.ffr_threshold
    paired = paired_rows(results, threshold)
    write_echoed_csv(out / "cases.csv", ["case_id", "score_pve_on", "score_pve_off", "invasive_label", "reference_ffr"], paired, config)
    report, roc_rows, svg = roc_report(
        [r[1] for r in paired], [r[2] for r in paired], [r[3] for r in paired], threshold
    )
    write_json(out / "stats.json", {**report, **provenance(config)})
    if roc_rows is not None:
        write_echoed_csv(out / "roc.csv", ["pve", "threshold", "fpr", "tpr"], roc_rows, config)
        atomic_write_text(out / "roc.svg", svg)
    return results


SWEEP_PARAMS = {"lambda": "graph_lambda", "k": "k_neighbors"}


def run_sweep(param: str, values, config: PipelineConfig, cases_dir, jobs: int = 1, models: Optional[Models] = None) -> list:
    """Mean (dice, msd, maxsd) over the cases for each parameter value (PVE mode from config)."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    models = models or prepare_models(config)
    cases = list_cases(cases_dir)
    mode = "on" if config.pve else "off"
    rows = []
    for value in values:
        value = int(value) if param == "k" else float(value)
        cfg = config.with_segmentation(**{SWEEP_PARAMS[param]: value})
        results = evaluate_cases(cases, models, cfg, jobs, modes=(mode,))
        m = np.array([[r.modes[mode].dice, r.modes[mode].msd, r.modes[mode].maxsd] for r in results])
        rows.append([value, *m.mean(axis=0)])
    return rows
