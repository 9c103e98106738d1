"""Command-line front end.

Every subcommand reads its inputs, runs one module operation and writes a
``report.json`` (plus artifacts) into ``--output``. Exit codes: 0 success,
1 validation failure or bad usage, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import box3d_metrics as b3
from . import cloud_projection as cp
from . import fisheye_models as fm
from . import model_fitting as mf
from . import task_metrics as tm
from . import undistortion as ud
from .report import RNG_NAME, EvalReport, RunConfig, atomic_save, atomic_write

log = logging.getLogger("woodgeom")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def validate_calibration(path: str | Path) -> fm.IntrinsicCalibration:
    """Load a calibration JSON, enforcing schema, principal point and monotonicity.

    Raises:
        OSError: file unreadable.
        ValueError: schema or model invariant violated (``NonMonotoneError``
            carries the theta where dr/dtheta <= 0).
    """
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: calibration must be a JSON object")
    return fm.calibration_from_dict(data)


# --- subcommand implementations -------------------------------------------------------
# each takes (args, cfg) and returns (results, artifacts) where artifacts maps a file
# name inside --output to a writer callable(path)


def _range(args) -> tuple[float, float]:
    lo, hi = args.range_deg
    return math.radians(lo), math.radians(hi)


def cmd_fit_models(args, cfg):
    cal = validate_calibration(args.calibration)
    fits = mf.compare_models(cal.model, _range(args), args.samples)
    lo, hi = _range(args)
    theta = np.linspace(lo, hi, args.samples)
    cols, header = [np.degrees(theta)], ["theta_deg"]
    for variant, res in fits.items():
        col = np.full(theta.size, np.nan)
        ref = cal.model.with_theta_max(max(hi, cal.model.theta_max)) if cal.model.theta_max < hi else cal.model
        inside = theta <= res.fitted.theta_max + 1e-12
        col[inside] = res.fitted.radius_unchecked(theta[inside]) - ref.radius_unchecked(theta[inside])
        cols.append(col)
        header.append(f"dev_{variant.value}_px")
    table = np.column_stack(cols)
    results = {"reference": fm.calibration_to_dict(cal), "fits": {v.value: r.summary() for v, r in fits.items()}}
    return results, {"deviations.csv": lambda p: mf.write_curves_csv(p, header, table)}


def cmd_curve_export(args, cfg):
    cal = validate_calibration(args.calibration)
    lo, hi = _range(args)
    fits = mf.compare_models(cal.model, (lo, hi), args.samples)
    ref = cal.model.with_theta_max(hi) if cal.model.theta_max < hi else cal.model
    models = [ref] + [r.fitted for r in fits.values()]
    names = ["poly4"] + [v.value for v in fits]
    header, table = mf.export_curves(models, (lo, hi), args.samples, names)
    results = {
        "rows": int(table.shape[0]),
        "columns": header,
        "fits": {v.value: r.summary() for v, r in fits.items()},
        "marker": "NaN beyond a model's valid range",
    }
    return results, {"curves.csv": lambda p: mf.write_curves_csv(p, header, table)}


def cmd_undistort(args, cfg):
    cal = validate_calibration(args.calibration)
    vp = ud.default_viewport(cal, args.viewport, args.out_width, args.out_height)
    if args.focal is not None:
        vp = ud.ViewportSpec(vp.kind, vp.out_width, vp.out_height, args.focal, planes=vp.planes)
    table = ud.build_remap(cal, vp, threads=args.threads)
    scale = ud.resampling_distortion_map(table)
    results = {
        "viewport": {"kind": vp.kind.value, "out_width": vp.out_width, "out_height": vp.out_height,
                     "focal_px": vp.focal,
                     "planes_deg": [[math.degrees(v) for v in (p.yaw, p.phi_lo, p.phi_hi)] for p in vp.planes]},
        "invalid_fraction": float(1 - table.valid.mean()),
        "area_scale": {
            "mean": float(np.nanmean(scale)) if np.isfinite(scale).any() else None,
            "max": float(np.nanmax(scale)) if np.isfinite(scale).any() else None,
        },
    }
    artifacts: dict[str, Callable] = {"remap.wsrm": table.save}
    if args.image:
        from PIL import Image

        with Image.open(args.image) as im:
            img = np.asarray(im)
        out = ud.apply_remap(table, img, fill=args.fill)
        artifacts["undistorted.png"] = lambda p: Image.fromarray(out).save(p, format="PNG")
    return results, artifacts


def cmd_project_cloud(args, cfg):
    cal = validate_calibration(args.calibration)
    pts = cp.read_points(args.cloud)
    pose = cp.RigidPose.identity()
    if args.pose:
        rec = json.loads(Path(args.pose).read_text())
        pose = cp.RigidPose(rec["quat"], rec["translation"])
    proj = cp.project_cloud(pts, pose, cal)
    filtered = proj if args.no_occlusion else cp.occlusion_filter(proj, args.cell_deg, args.tau)
    depth = cp.rasterize_depth(filtered, cal)
    results = {
        "points_in": int(pts.shape[0]),
        "points_projected": len(proj),
        "points_after_occlusion": len(filtered),
        "valid_pixels": depth.valid_count,
        "depth_convention": "euclidean range (m)",
    }
    return results, {
        "depth.pfm": lambda p: cp.write_pfm(p, np.where(depth.valid, depth.depth, 0.0)),
        "depth_mask.pgm": lambda p: cp.write_pgm(p, depth.valid.astype(np.uint8) * 255),
    }


def _weights(args) -> b3.SrtWeights:
    return b3.SrtWeights(args.w_s, args.w_t, args.w_r, args.alpha, args.beta, args.gamma)


def cmd_eval_3d(args, cfg):
    preds = b3.read_boxes_jsonl(args.preds, require_conf=True)
    gts = b3.read_boxes_jsonl(args.gts)
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            results = b3.evaluate_detections(preds, gts, args.criterion, args.threshold, _weights(args), pool.map)
    else:
        results = b3.evaluate_detections(preds, gts, args.criterion, args.threshold, _weights(args))
    return results, {}


def cmd_eval_2d(args, cfg):
    per_class, m = tm.map_2d(tm.read_det2d_jsonl(args.preds), tm.read_det2d_jsonl(args.gts), args.iou_thresh)
    return {"per_class_ap": per_class, "map": m, "iou_thresh": args.iou_thresh, "recall_points": 41}, {}


def cmd_eval_seg(args, cfg):
    pred, gt = tm.read_mask(args.pred), tm.read_mask(args.gt)
    iou, miou = tm.mean_iou(pred, gt, args.n_classes)
    return {"per_class_iou": iou.tolist(), "mean_iou": miou,
            "excluded_classes": [int(i) for i in np.flatnonzero(np.isnan(iou))]}, {}


def cmd_eval_soiling(args, cfg):
    jac, exact = tm.soiling_jaccard(tm.read_binary_csv(args.labels), tm.read_binary_csv(args.preds))
    return {"mean_jaccard": jac, "exact_match": exact, "empty_union_score": 1.0}, {}


def cmd_eval_depth(args, cfg):
    pred = cp.load_depth_map(args.pred, args.pred_mask)
    gt = cp.load_depth_map(args.gt, args.gt_mask)
    rmse, n = tm.depth_rmse(pred, gt)
    return {"rmse_m": rmse, "compared_pixels": n}, {}


def cmd_eval_vo(args, cfg):
    res = tm.vo_tolerance(tm.PoseTrack.read_tum(args.pred), tm.PoseTrack.read_tum(args.gt), args.t_tol, args.r_tol)
    return {
        "translation_within_tol_pct": res.translation_pct,
        "rotation_within_tol_pct": res.rotation_pct,
        "scale": res.scale,
        "n_deltas": int(res.translation_err.size),
        "t_tol_m": args.t_tol,
        "r_tol_deg": args.r_tol,
        "mode": "relative consecutive-frame deltas after global scale alignment",
    }, {}


def cmd_bench_metric(args, cfg):
    res = b3.bench_pairwise(args.pairs, args.metric, seed=args.seed, repeats=args.repeats)
    results = {
        "n_pairs": res.n_pairs,
        "sample_digest": res.digest,
        "ns_per_pair": res.ns_per_pair,
        "total_s": res.total_s,
    }
    if {"srt", "iou3d"} <= set(args.metric):
        results["iou3d_over_srt"] = res.speedup
    return results, {}


# --- parser --------------------------------------------------------------------------------

_INPUTS = {
    "fit-models": ["calibration"],
    "curve-export": ["calibration"],
    "undistort": ["calibration", "image"],
    "project-cloud": ["calibration", "cloud", "pose"],
    "eval-3d": ["preds", "gts"],
    "eval-2d": ["preds", "gts"],
    "eval-seg": ["pred", "gt"],
    "eval-soiling": ["labels", "preds"],
    "eval-depth": ["pred", "gt", "pred_mask", "gt_mask"],
    "eval-vo": ["pred", "gt"],
    "bench-metric": [],
}

_COMMANDS = {
    "fit-models": cmd_fit_models,
    "curve-export": cmd_curve_export,
    "undistort": cmd_undistort,
    "project-cloud": cmd_project_cloud,
    "eval-3d": cmd_eval_3d,
    "eval-2d": cmd_eval_2d,
    "eval-seg": cmd_eval_seg,
    "eval-soiling": cmd_eval_soiling,
    "eval-depth": cmd_eval_depth,
    "eval-vo": cmd_eval_vo,
    "bench-metric": cmd_bench_metric,
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = _Parser(add_help=False)
    common.add_argument("--output", "-o", default="woodgeom_out", help="output directory")
    common.add_argument("--config", help="JSON file of option defaults (explicit flags win)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $WOODGEOM_THREADS or 1)")

    parser = _Parser(prog="woodgeom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        subs[name] = p
        return p

    for name in ("fit-models", "curve-export"):
        p = add(name, "fit alternative models to a calibration" if name == "fit-models" else "tabulate r(theta) curves")
        p.add_argument("--calibration", required=True)
        p.add_argument("--range-deg", nargs=2, type=float, default=[0.0, 120.0], metavar=("LO", "HI"))
        p.add_argument("--samples", type=int, default=241 if name == "fit-models" else 121)

    p = add("undistort", "build a remap table and optionally warp an image")
    p.add_argument("--calibration", required=True)
    p.add_argument("--viewport", choices=[k.value for k in ud.ViewportKind], default="rect")
    p.add_argument("--image")
    p.add_argument("--out-width", type=int)
    p.add_argument("--out-height", type=int)
    p.add_argument("--focal", type=float)
    p.add_argument("--fill", type=float, default=0.0)

    p = add("project-cloud", "project a point cloud to sparse depth")
    p.add_argument("--calibration", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--pose", help="JSON {quat: [x,y,z,w], translation: [x,y,z]} of the camera in the cloud frame")
    p.add_argument("--cell-deg", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--no-occlusion", action="store_true")

    p = add("eval-3d", "3D box AP/AOS")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--criterion", choices=["srt", "iou3d"], default="iou3d")
    p.add_argument("--threshold", type=float, default=0.5)
    for flag, default in (("--w-s", 0.3), ("--w-t", 1.0), ("--w-r", 0.5), ("--alpha", 0.3),
                          ("--beta", 0.3), ("--gamma", 0.4)):
        p.add_argument(flag, type=float, default=default)

    p = add("eval-2d", "2D box mAP")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.5)

    p = add("eval-seg", "segmentation mean IoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--n-classes", type=int, required=True)

    p = add("eval-soiling", "soiling multilabel Jaccard")
    p.add_argument("--labels", required=True)
    p.add_argument("--preds", required=True)

    p = add("eval-depth", "sparse depth RMSE")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-mask")
    p.add_argument("--gt-mask")

    p = add("eval-vo", "visual odometry tolerance rates")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--t-tol", type=float, default=0.005, help="metres")
    p.add_argument("--r-tol", type=float, default=0.1, help="degrees")

    p = add("bench-metric", "per-pair runtime of srt vs iou3d")
    p.add_argument("--pairs", type=int, default=100_000)
    p.add_argument("--metric", nargs="+", choices=["srt", "iou3d"], default=["srt", "iou3d"])
    p.add_argument("--repeats", type=int, default=3)
    return parser, subs


def _parse(argv: list[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    # the config file may supply required options, so read it before the full parse
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    if config and argv and argv[0] in subs:
        try:
            overrides = json.loads(Path(config).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{config}: invalid JSON ({exc})") from exc
        if not isinstance(overrides, dict):
            raise ValueError("--config must hold a JSON object")
        sp = subs[argv[0]]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(k.replace("-", "_") for k in overrides) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        # required options may now come from the config file
        for action in sp._actions:
            if action.dest in {k.replace("-", "_") for k in overrides}:
                action.required = False
    args = parser.parse_args(argv)
    if args.threads is None:
        env = os.environ.get("WOODGEOM_THREADS")
        try:
            args.threads = int(env) if env else 1
        except ValueError:
            raise UsageError(f"WOODGEOM_THREADS={env!r} is not an integer") from None
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"woodgeom: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"woodgeom: {exc}", file=sys.stderr)
        return EXIT_IO

    params = {k: v for k, v in vars(args).items()
              if k not in ("subcommand", "output", "config", "seed", "threads") and k not in _INPUTS[args.subcommand]}
    cfg = RunConfig(
        subcommand=args.subcommand,
        inputs={k: getattr(args, k) for k in _INPUTS[args.subcommand] if getattr(args, k) is not None},
        output=args.output,
        params=params,
        seed=args.seed,
        threads=args.threads,
    )
    missing = cfg.missing_inputs()
    if missing:
        print(f"woodgeom: input file(s) not found: {', '.join(missing)}", file=sys.stderr)
        return EXIT_IO

    t0 = time.perf_counter()
    warnings: list[str] = []
    with logging_capture(warnings):
        try:
            results, artifacts = _COMMANDS[args.subcommand](args, cfg)
        except OSError as exc:
            print(f"woodgeom: {exc}", file=sys.stderr)
            return EXIT_IO
        except (ValueError, KeyError, TypeError) as exc:
            print(f"woodgeom: {args.subcommand}: {exc}", file=sys.stderr)
            return EXIT_INVALID
    elapsed = time.perf_counter() - t0

    report = EvalReport(
        subcommand=args.subcommand,
        config={"inputs": cfg.inputs, "output": cfg.output, "params": cfg.params,
                "seed": cfg.seed, "threads": cfg.threads},
        results=results,
        timing={"wall_s": elapsed},
        warnings=warnings,
        rng={"generator": RNG_NAME, "seed": cfg.seed},
    )
    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, writer in artifacts.items():
            atomic_save(out / name, writer)
        atomic_write(out / "report.json", report.to_json() + "\n")
    except OSError as exc:
        print(f"woodgeom: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps({"report": str(out / "report.json"), "artifacts": sorted(artifacts)}))
    return EXIT_OK


class logging_capture:
    """Collect warnings logged during a run into the report."""

    def __init__(self, sink: list[str]):
        self.sink = sink
        self.handler = logging.Handler(logging.WARNING)
        self.handler.emit = lambda record: sink.append(record.getMessage())

    def __enter__(self):
        log.addHandler(self.handler)
        return self

    def __exit__(self, *exc: Any):
        log.removeHandler(self.handler)
        return False


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
