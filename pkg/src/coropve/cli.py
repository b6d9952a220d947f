"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig
from .errors import DataError, NumericalError
from .flowsim import build_network, calibrate_outlet_scale, solve_flow, tree_from_surfaces
from .formats import (
    atomic_write_text,
    load_centerline_tree,
    load_phantom_case,
    load_phantom_spec,
    load_radius_model,
    load_raydb,
    load_surface,
    load_volume,
    read_csv,
    read_json,
    save_phantom_case,
    save_radius_model,
    save_raydb,
    surface_to_dict,
    write_json,
    write_profile_csv,
)
from .graphcut import rasterize_surface, run_segmentation
from .metrics import dice, surface_distances
from .phantom import generate_phantom, hu_reduction_curve
from .pipeline import (
    build_training_database,
    default_jobs,
    ffr_record,
    list_cases,
    provenance,
    run_pipeline,
    run_sweep,
    stenosis_suite,
    truth_surface,
    write_echoed_csv,
)
from .plots import profile_svg
from .pve import calibrate_radius_model
from .stats_report import labels_from_reference, roc_report

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_dict(read_json(path))


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


# -- commands ------------------------------------------------------------------------

def cmd_phantom_gen(args):
    spec = load_phantom_spec(args.spec)
    truth = generate_phantom(spec, seed=args.seed)
    save_phantom_case(truth, args.out, args.seed, {"tool": "coropve", "version": __version__})


def cmd_phantom_suite(args):
    out = Path(args.out)
    for n, (name, spec) in enumerate(sorted(stenosis_suite().items())):
        save_phantom_case(generate_phantom(spec, seed=args.seed + n), out / name, args.seed + n, {"tool": "coropve", "version": __version__})


def _first_spec(phantom_dir: Path):
    cands = [phantom_dir / "phantom-spec.json"] + sorted(phantom_dir.glob("*/phantom-spec.json"))
    for c in cands:
        if c.exists():
            return load_phantom_spec(c)
    raise DataError(f"{phantom_dir}: no phantom-spec.json found")


def cmd_calibrate(args):
    spec = _first_spec(Path(args.phantom_dir))
    diameters = _float_list(args.diameters) if args.diameters else PipelineConfig().training.calibration_diameters_mm
    curve = hu_reduction_curve(diameters, spec.lumen_hu, spec.background_hu, args.psf_sigma)
    model = calibrate_radius_model(curve)
    save_radius_model(
        model,
        args.out,
        {
            "psf_sigma_mm": args.psf_sigma,
            "lumen_hu": spec.lumen_hu,
            "background_hu": spec.background_hu,
            "calibration_curve": [{"diameter_mm": d, "reduction": r} for d, r in curve],
            "tool": "coropve",
            "version": __version__,
        },
    )


def cmd_raydb_build(args):
    config = _load_config(args.config)
    cases = list_cases(args.phantom_dir)
    if not cases:
        raise DataError(f"{args.phantom_dir}: no phantom case directories found")
    db = build_training_database(config, [load_phantom_case(c) for c in cases])
    save_raydb(db, args.out)


def cmd_segment(args):
    config = _load_config(args.config).replace(pve=args.pve == "on")
    vol = load_volume(args.volume)
    tree = load_centerline_tree(args.centerline)
    if not 0 <= args.branch < len(tree.branches):
        raise DataError(f"{args.centerline}: branch {args.branch} does not exist")
    db = load_raydb(args.raydb)
    radius_model = load_radius_model(args.pve_model) if args.pve_model else None
    if config.pve and radius_model is None:
        raise UsageError("--pve on requires --pve-model")
    res = run_segmentation(vol, tree.branches[args.branch], db, config.pve, config.segmentation, radius_model)
    echo = {**provenance(config), "pve": args.pve, "branch": args.branch}
    write_json(args.out, surface_to_dict(res.surface, echo))
    if args.profile_csv and res.profile is not None:
        write_profile_csv(args.profile_csv, res.profile, res.profile_model)
        atomic_write_text(Path(args.profile_csv).with_suffix(".svg"), profile_svg(res.profile, res.profile_model))


def _branch_surface(surfaces_dir: Path, k: int, n_branches: int):
    named = surfaces_dir / f"branch_{k}.surface.json"
    if named.exists():
        return load_surface(named)
    if n_branches == 1:
        found = sorted(surfaces_dir.glob("*.surface.json"))
        if len(found) == 1:
            return load_surface(found[0])
    raise DataError(f"{surfaces_dir}: missing branch_{k}.surface.json")


def cmd_flow(args):
    config = _load_config(args.config)
    scale = config.flow.outlet_scale if config.flow.outlet_scale is not None else calibrate_outlet_scale(config.flow)
    trees = {}
    for topo_path in args.topology:
        topo = load_centerline_tree(topo_path)
        surfaces = [_branch_surface(Path(args.surfaces), k, len(topo.branches)) for k in range(len(topo.branches))]
        tree = tree_from_surfaces(surfaces, topo)
        net = build_network(tree, config.flow, scale)
        result = solve_flow(net)
        key = topo.tree_side
        if key in trees:
            raise DataError(f"{topo_path}: a {key} tree was already given")
        trees[key] = ffr_record(tree, net, result, config)
    write_json(args.out, {"trees": trees, **provenance(config)})


def cmd_eval_seg(args):
    truth = load_phantom_case(args.truth)
    surface = load_surface(args.pred)
    mask = rasterize_surface(surface, truth.lumen_mask)
    d = dice(mask, np.asarray(truth.lumen_mask.values, dtype=bool))
    msd, maxsd = surface_distances(surface.points(), truth_surface(truth, surface).points())
    config = PipelineConfig()
    write_echoed_csv(args.out, ["case_id", "dice", "msd_mm", "maxsd_mm"], [[Path(args.truth).name, d, msd, maxsd]], config)


def cmd_eval_roc(args):
    rows = read_csv(args.cases)
    need = ("case_id", "score_pve_on", "score_pve_off", "invasive_label")
    for n, row in enumerate(rows):
        for key in need:
            if row.get(key) in (None, ""):
                raise DataError(f"{args.cases}: row {n + 2} is missing column '{key}'")
    try:
        on = [float(r["score_pve_on"]) for r in rows]
        off = [float(r["score_pve_off"]) for r in rows]
        labels = labels_from_reference([float(r["invasive_label"]) for r in rows], args.threshold)
    except ValueError as exc:
        raise DataError(f"{args.cases}: non-numeric value ({exc})") from exc
    report, _, svg = roc_report(on, off, labels, args.threshold)
    report["case_ids"] = [r["case_id"] for r in rows]
    write_json(args.out, {**report, "tool": "coropve", "version": __version__})
    if args.plot and svg is not None:
        atomic_write_text(args.plot, svg)


def cmd_sweep(args):
    config = _load_config(args.config)
    values = _float_list(args.values)
    rows = run_sweep(args.param, values, config, args.cases, jobs=args.jobs)
    write_echoed_csv(args.out, [args.param, "mean_dice", "mean_msd_mm", "mean_maxsd_mm"], rows, config)


def cmd_pipeline_run(args):
    config = _load_config(args.config)
    run_pipeline(config, args.cases, args.out, jobs=args.jobs)


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coropve", description="Partial-volume-aware coronary lumen segmentation and FFR.")
    p.add_argument("--version", action="version", version=f"coropve {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom").add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = ph.add_parser("gen", help="generate one phantom case directory")
    g.add_argument("--spec", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_gen)
    s = ph.add_parser("suite", help="generate the default stenosis phantom suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom_suite)

    c = sub.add_parser("calibrate", help="fit the radius model to a blurred-cylinder HU reduction curve")
    c.add_argument("--phantom-dir", required=True)
    c.add_argument("--psf-sigma", type=float, required=True)
    c.add_argument("--diameters", help="comma-separated calibration diameters (mm)")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    rd = sub.add_parser("raydb").add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = rd.add_parser("build", help="build a ray database from labeled phantom cases")
    b.add_argument("--phantom-dir", required=True)
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_raydb_build)

    sg = sub.add_parser("segment", help="segment one centerline branch")
    sg.add_argument("--volume", required=True)
    sg.add_argument("--centerline", required=True)
    sg.add_argument("--branch", type=int, default=0)
    sg.add_argument("--raydb", required=True)
    sg.add_argument("--pve-model")
    sg.add_argument("--pve", choices=("on", "off"), required=True)
    sg.add_argument("--config")
    sg.add_argument("--profile-csv")
    sg.add_argument("--out", required=True)
    sg.set_defaults(func=cmd_segment)

    f = sub.add_parser("flow", help="lumped-parameter FFR from branch surfaces")
    f.add_argument("--surfaces", required=True, help="directory of branch_<k>.surface.json files")
    f.add_argument("--topology", required=True, action="append", help="centerline tree (repeat for left/right)")
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_flow)

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True, parser_class=_Parser)
    es = ev.add_parser("seg", help="Dice / surface distances against a phantom truth")
    es.add_argument("--pred", required=True)
    es.add_argument("--truth", required=True)
    es.add_argument("--out", required=True)
    es.set_defaults(func=cmd_eval_seg)
    er = ev.add_parser("roc", help="confusion, ROC/AUC and DeLong for paired PVE on/off scores")
    er.add_argument("--cases", required=True)
    er.add_argument("--threshold", type=float, default=0.8)
    er.add_argument("--out", required=True)
    er.add_argument("--plot")
    er.set_defaults(func=cmd_eval_roc)

    sw = sub.add_parser("sweep", help="segmentation metrics versus lambda or K")
    sw.add_argument("--param", choices=("lambda", "k"), required=True)
    sw.add_argument("--values", required=True)
    sw.add_argument("--cases", required=True)
    sw.add_argument("--config")
    sw.add_argument("--jobs", type=int, default=None)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("pipeline").add_subparsers(dest="action", required=True, parser_class=_Parser)
    pr = pl.add_parser("run", help="end-to-end run with paired PVE on/off outputs")
    pr.add_argument("--config")
    pr.add_argument("--cases", required=True)
    pr.add_argument("--jobs", type=int, default=None)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_pipeline_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 0) is None:
        args.jobs = default_jobs()
    try:
        args.func(args)
    except UsageError as exc:
        print(f"coropve: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"coropve: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"coropve: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
