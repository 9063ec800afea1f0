"""Command-line interface.

Exit codes: 0 success, 1 usage, configuration or I/O error, 2 domain
failure (unplannable ROI, no RANSAC consensus, ...). Every JSON document
written by this module carries ``schema_version``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__, vlm_client
from .config import ConfigError, PipelineConfig, load_config, load_scene
from .cylinder_fit import CulvertModel, fit_circle_ransac, load_point_cloud
from .errors import BackendFailure, DomainFailure, FixtureMiss, VisionError, VlmError
from .mission import SCHEMA_VERSION, build_report, report_digest, run_mission, write_audit_log
from .roi_fusion import EnrichedRoi, RoiProposal, enrich, load_depth, local_point_cloud
from .simulator import SimulatedRobot, SyntheticVlm
from .viewplan import Unplannable, plan_viewpoint

logger = logging.getLogger("vision_inspect")

EXIT_OK = 0
EXIT_IO = 1
EXIT_DOMAIN = 2


class CliError(Exception):
    """Usage, configuration or I/O problem (exit 1)."""


def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
        logger.info("wrote %s", out)
    print(text)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _config(args) -> PipelineConfig:
    if args.config:
        _require(args.config, "config file")
    cfg = load_config(args.config)
    if args.seed is not None:
        ransac = dataclasses.replace(cfg.ransac, seed=args.seed)
        cfg = dataclasses.replace(cfg, ransac=ransac, mission=dataclasses.replace(cfg.mission, ransac=ransac))
    return cfg


def _backend(args, robot: SimulatedRobot | None = None):
    if args.live:
        try:
            return vlm_client.LiveBackend()
        except VlmError as exc:
            raise CliError(str(exc)) from None
    if getattr(args, "write_fixtures", False):
        if robot is None or not args.fixtures:
            raise CliError("--write-fixtures needs --fixtures DIR")
        return vlm_client.RecordingBackend(SyntheticVlm(robot), args.fixtures)
    if args.fixtures:
        _require(args.fixtures, "fixture directory")
        return vlm_client.replay_backend(args.fixtures)
    if robot is not None:
        return SyntheticVlm(robot)
    raise CliError("no VLM backend: pass --fixtures DIR or --live")


# --------------------------------------------------------------------------
# subcommands


def cmd_fit_cylinder(args) -> int:
    cfg = _config(args)
    points = load_point_cloud(_require(args.points, "point cloud"), fmt=args.format)
    model, inliers = fit_circle_ransac(points, cfg.ransac)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "culvert_model",
        "model": model.to_dict(),
        "inliers": int(inliers.sum()),
        "points": int(len(points)),
        "seed": cfg.ransac.seed,
    }
    _emit(doc, args.out)
    return EXIT_OK


def cmd_fuse_roi(args) -> int:
    cfg = _config(args)
    depth = load_depth(_require(args.depth, "depth image"))
    doc = _read_json(_require(args.proposals, "proposal file"))
    entries = doc["proposals"] if isinstance(doc, dict) else doc
    if args.model:
        model = CulvertModel.from_dict(_read_json(_require(args.model, "model file"))["model"])
    else:
        model, _ = fit_circle_ransac(local_point_cloud(depth, cfg.K1, cfg.rig, robot_x=args.robot_x), cfg.ransac)
    out, failed = [], 0
    for i, entry in enumerate(entries):
        try:
            prop = RoiProposal.from_dict(entry)
            roi = enrich(prop, depth, cfg.K1, cfg.rig, model, robot_x=args.robot_x, image_ref=str(args.depth))
            out.append({"status": "ok", "roi": roi.to_dict()})
        except (VisionError, ValueError, KeyError, TypeError) as exc:
            failed += 1
            out.append({"status": "unplannable", "index": i, "proposal": entry, "reason": f"{type(exc).__name__}: {exc}"})
    result = {
        "schema_version": SCHEMA_VERSION,
        "kind": "enriched_rois",
        "robot_x": args.robot_x,
        "model": model.to_dict(),
        "rois": out,
    }
    _emit(result, args.out)
    return EXIT_DOMAIN if failed else EXIT_OK


def _load_rois(path) -> list:
    doc = _read_json(_require(path, "ROI file"))
    if isinstance(doc, dict) and "rois" in doc:
        return doc["rois"]
    if isinstance(doc, dict):
        return [{"status": "ok", "roi": doc}]
    return list(doc)


def render_diagnostic(path, solution, K, weights) -> None:
    """Draw the frame, the margin-inset frame and the projected ROI vertices."""
    from PIL import Image, ImageDraw

    pad = 80
    img = Image.new("RGB", (K.width + 2 * pad, K.height + 2 * pad), (235, 235, 235))
    draw = ImageDraw.Draw(img)
    m = weights.alpha * min(K.width, K.height)
    draw.rectangle([pad, pad, pad + K.width - 1, pad + K.height - 1], fill=(255, 255, 255), outline=(0, 0, 0))
    draw.rectangle([pad + m, pad + m, pad + K.width - m, pad + K.height - m], outline=(0, 140, 0))
    cx, cy = pad + K.cx, pad + K.cy
    draw.line([cx - 8, cy, cx + 8, cy], fill=(120, 120, 120))
    draw.line([cx, cy - 8, cx, cy + 8], fill=(120, 120, 120))
    for u, v in solution.projected_vertices:
        inside = m <= u <= K.width - m and m <= v <= K.height - m
        colour = (0, 90, 220) if inside else (220, 0, 0)
        x, y = pad + u, pad + v
        draw.ellipse([x - 4, y - 4, x + 4, y + 4], fill=colour)
    g = solution.refined
    draw.text((pad, 8), f"psi={g.psi:+.4f} rad  phi={g.phi:+.4f} rad  x={g.x:.3f} m", fill=(0, 0, 0))
    draw.text((pad, 24), f"J2 seed={solution.cost_seed:.4g}  refined={solution.cost_refined:.4g}", fill=(0, 0, 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def cmd_plan_viewpoint(args) -> int:
    cfg = _config(args)
    entries = _load_rois(args.rois)
    rig = cfg.rig
    if args.x_min is not None or args.x_max is not None:
        lo = args.x_min if args.x_min is not None else rig.x_bounds[0]
        hi = args.x_max if args.x_max is not None else rig.x_bounds[1]
        rig = dataclasses.replace(rig, x_bounds=(lo, hi))
    records, failed = [], 0
    for i, entry in enumerate(entries):
        if entry.get("status") != "ok":
            failed += 1
            records.append({"status": "unplannable", "roi_index": i, "reason": entry.get("reason", "no ROI")})
            continue
        roi = EnrichedRoi.from_dict(entry["roi"])
        res = plan_viewpoint(roi, rig, cfg.K2, cfg.weights, cfg.grid, roi_index=i)
        if isinstance(res, Unplannable):
            failed += 1
            records.append(res.to_dict())
            continue
        records.append(res.to_dict())
        if args.render_diagnostics:
            target = Path(args.render_diagnostics)
            if len(entries) > 1:
                target = target.with_name(f"{target.stem}_{i:02d}{target.suffix or '.png'}")
            render_diagnostic(target, res, cfg.K2, cfg.weights)
    doc = {"schema_version": SCHEMA_VERSION, "kind": "viewpoint_solutions", "solutions": records}
    _emit(doc, args.out)
    return EXIT_DOMAIN if failed else EXIT_OK


def _phase_summary(report: dict) -> str:
    t = report["timing"]
    lines = [f"simulated total: {t['total_s']:.1f} s ({t['total_s'] / 60:.2f} min), visits: {t['visits']}"]
    for phase, seconds in t["per_phase_s"].items():
        lines.append(f"  {phase:<12s} {seconds:9.1f} s")
    return "\n".join(lines)


def cmd_simulate_mission(args) -> int:
    cfg = _config(args)
    if args.scene:
        scene = load_scene(_require(args.scene, "scene file"))
    elif cfg.scene is not None:
        scene = cfg.scene
    else:
        raise CliError("no scene: pass --scene FILE or add a scene section to the config")
    if args.seed is not None:
        scene = dataclasses.replace(scene, seed=args.seed)
    mcfg = cfg.mission
    if args.max_waypoints is not None:
        mcfg = dataclasses.replace(mcfg, max_waypoints=args.max_waypoints)
    out = Path(args.out) if args.out else None
    robot = SimulatedRobot(scene, mcfg.rig, mcfg.K1, mcfg.K2, out_dir=(out / "frames") if out and args.save_frames else None)
    backend = _backend(args, robot)
    result = run_mission(mcfg, robot, backend)
    report = build_report(mcfg, result)
    report["digest"] = report_digest(report)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_audit_log(out / "audit.jsonl", result.audit)
        logger.info("wrote %s and %s", out / "report.json", out / "audit.jsonl")
    print(_phase_summary(report))
    print(f"records: {len(report['records'])}  report digest: {report['digest']}")
    return EXIT_OK


def cmd_assess(args) -> int:
    entries = _load_rois(args.roi)
    if not 0 <= args.index < len(entries) or entries[args.index].get("status") != "ok":
        raise CliError(f"{args.roi}: no enriched ROI at index {args.index}")
    roi = EnrichedRoi.from_dict(entries[args.index]["roi"])
    record = vlm_client.assess(roi, args.closeup, _backend(args))
    doc = {"schema_version": SCHEMA_VERSION, "kind": "assessment", "assessment": record.to_dict()}
    _emit(doc, args.out)
    return EXIT_OK


def format_report(report: dict) -> str:
    lines = [f"mission report (schema {report.get('schema_version')}), waypoints: {len(report['waypoints'])}"]
    for rec in report["records"]:
        head = f"[wp {rec['waypoint_index']:02d} @ {rec['waypoint_x']:.1f} m] {rec['proposal']['reason']}"
        if rec["failure"]:
            lines.append(f"{head}\n    FAILED: {rec['failure']}")
            continue
        g = rec["solution"]["refined"]
        a = rec["assessment"]
        lines.append(f"{head}\n    view psi={g['psi_deg']:+.1f} deg phi={g['phi_deg']:+.1f} deg x={g['x_m']:.2f} m")
        if a is not None:
            desc = f": {a['description']}" if a.get("description") else ""
            lines.append(f"    {a['result']}{desc}")
    if "timing" in report:
        lines.append(_phase_summary(report))
    return "\n".join(lines)


def cmd_report(args) -> int:
    report = _read_json(_require(args.report, "report file"))
    if report.get("kind") != "mission_report":
        raise CliError(f"{args.report}: not a mission report")
    if args.json:
        counts = {}
        for rec in report["records"]:
            label = rec["assessment"]["result"] if rec["assessment"] else "Failed"
            counts[label] = counts.get(label, 0) + 1
        _emit({"schema_version": SCHEMA_VERSION, "kind": "report_summary", "counts": counts,
               "timing": report.get("timing")}, args.out)
    else:
        text = format_report(report)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, default=None, help="override RANSAC / scene seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="count", default=0)

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--fixtures", help="replay fixture directory")
    backend.add_argument("--live", action="store_true", help="use the HTTP endpoint from VISION_VLM_ENDPOINT")

    parser = argparse.ArgumentParser(prog="vision-inspect", description="Culvert viewpoint-planning pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-cylinder", parents=[common], help="RANSAC circle fit of a point cloud")
    p.add_argument("points")
    p.add_argument("--format", choices=("txt", "bin"), default="txt")
    p.set_defaults(func=cmd_fit_cylinder)

    p = sub.add_parser("fuse-roi", parents=[common], help="lift ROI proposals to 3D using a depth image")
    p.add_argument("--depth", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--model", help="culvert model JSON; fitted from the depth image when omitted")
    p.add_argument("--robot-x", type=float, default=0.0)
    p.set_defaults(func=cmd_fuse_roi)

    p = sub.add_parser("plan-viewpoint", parents=[common], help="plan camera-2 viewpoints for enriched ROIs")
    p.add_argument("rois")
    p.add_argument("--x-min", type=float)
    p.add_argument("--x-max", type=float)
    p.add_argument("--render-diagnostics", metavar="PNG")
    p.set_defaults(func=cmd_plan_viewpoint)

    p = sub.add_parser("simulate-mission", parents=[common, backend], help="run a full mission in the simulator")
    p.add_argument("--scene")
    p.add_argument("--max-waypoints", type=int)
    p.add_argument("--write-fixtures", action="store_true", help="record synthetic VLM answers into --fixtures")
    p.add_argument("--save-frames", action="store_true")
    p.set_defaults(func=cmd_simulate_mission)

    p = sub.add_parser("assess", parents=[common, backend], help="assess one enriched ROI against close-ups")
    p.add_argument("roi")
    p.add_argument("--closeup", action="append", required=True)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("report", parents=[common], help="summarize a mission report")
    p.add_argument("report")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_IO
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, FixtureMiss, BackendFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DomainFailure, VisionError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
