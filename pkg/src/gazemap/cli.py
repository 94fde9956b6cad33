"""Command-line entry point: ``gazemap <subcommand> ...``.

Every subcommand returns 0 on success, 2 for bad input (any
:class:`~gazemap.errors.GazemapError`, or an argparse usage error) and 1 for
anything unexpected.  JSON reports embed the resolved configuration and the
tool version; ``--deterministic`` drops the wall-clock timestamp so reruns
are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import GazemapError, SchemaError
from .features import FeatureParams
from .geometry import BoundingBox, RansacParams
from .imaging import IMAGE_SUFFIXES
from .metrics import (
    correlation_table,
    read_worker_metrics,
    compute_metrics,
    correlation_rows,
    dwell_rows,
    search_rows,
    validation_rows,
    validation_accuracy,
    write_table_csv,
)
from .registry import build_registry, load_registry, propagate_aois, save_registry, seed_aoi
from .session import LocalizeParams, SessionParams, ingest_gaze_log, load_frames, run_session
from .synth import case_study_spec, default_spec, generate_scene, generate_session, parse_spec, write_outputs

log = logging.getLogger("gazemap")

BUILTIN_SPECS = {"default": default_spec, "case-study": case_study_spec}


# --- helpers ---------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _report(args, config: dict, body: dict) -> dict:
    out = {"tool": {"name": "gazemap", "version": __version__}, "config": config, **body}
    if not args.deterministic:
        out["created_unix"] = round(time.time(), 3)
    return out


def _write_json(path, obj) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(_dump(obj))


def _parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise GazemapError(f"--box needs x0,y0,x1,y1, got {text!r}")
    try:
        vals = [float(v) for v in parts]
    except ValueError as exc:
        raise GazemapError(f"--box values must be numbers: {text!r}") from exc
    return BoundingBox.from_list(vals)


def _feature_params(args) -> FeatureParams:
    return FeatureParams(
        max_keypoints=args.max_keypoints,
        threshold=args.threshold,
        n_levels=args.levels,
        scale_factor=args.scale_factor,
        detector=args.detector,
        fast_threshold=args.fast_threshold,
    )


def _read_dwell_table(path) -> dict:
    """AOI -> dwell ms from a JSON mapping, an analyze report, or an ``aoi_id,dwell_ms`` CSV."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise GazemapError(f"cannot read {p}: {exc}") from exc
    if p.suffix.lower() == ".csv":
        rows = list(csv.reader(text.splitlines()))
        if not rows or [c.strip() for c in rows[0]] != ["aoi_id", "dwell_ms"]:
            raise SchemaError(f"{p}: expected header aoi_id,dwell_ms")
        out = {}
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            try:
                out[row[0].strip()] = float(row[1])
            except (IndexError, ValueError) as exc:
                raise SchemaError(f"{p}:{lineno}: bad row") from exc
        return out
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{p}: invalid JSON: {exc}") from exc
    if isinstance(data, dict) and "metrics" in data:
        data = data["metrics"].get("dwell_ms")
    if not isinstance(data, dict):
        raise SchemaError(f"{p}: expected an object mapping AOI id to dwell ms")
    try:
        return {str(k): float(v) for k, v in data.items()}
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{p}: dwell values must be numbers") from exc


# --- subcommands -------------------------------------------------------------------

def cmd_build_registry(args) -> int:
    frames = Path(args.frames)
    if not frames.is_dir():
        raise GazemapError(f"not a directory: {frames}")
    paths = sorted(p for p in frames.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise GazemapError(f"no images in {frames}")
    fp = _feature_params(args)
    reg = build_registry(paths, args.poses, fp)
    save_registry(reg, args.out)
    n_kp = sum(len(im.features) for im in reg.images)
    print(f"registry: {len(reg.images)} images, {n_kp} keypoints -> {args.out}")
    return 0


def cmd_annotate(args) -> int:
    reg = load_registry(args.registry)
    if args.aois:
        try:
            entries = json.loads(Path(args.aois).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise GazemapError(f"cannot read {args.aois}: {exc}") from exc
        if not isinstance(entries, list):
            raise SchemaError(f"{args.aois}: expected a list of AOI objects")
        for e in entries:
            try:
                reg = seed_aoi(reg, e["aoi_id"], e.get("label", ""), e["image"], BoundingBox.from_list(e["box"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{args.aois}: bad AOI entry {e!r}") from exc
    else:
        missing = [f"--{n}" for n in ("aoi", "image", "box") if getattr(args, n) is None]
        if missing:
            raise GazemapError(f"annotate needs {', '.join(missing)} (or --aois FILE)")
        reg = seed_aoi(reg, args.aoi, args.label or "", args.image, _parse_box(args.box))
    save_registry(reg, args.registry)
    print(f"annotated: {len(reg.aois)} AOIs on {len(reg.annotated_ids())} images")
    return 0


def cmd_propagate(args) -> int:
    reg = load_registry(args.registry)
    reg, rep = propagate_aois(reg, args.min_inliers, args.top_k, None)
    save_registry(reg, args.registry)
    covered = len(reg.annotated_ids())
    print(f"propagated: {len(rep.propagated)}, uncovered: {len(rep.uncovered)}")
    print(f"coverage: {covered}/{len(reg.images)}")
    if rep.uncovered:
        print("uncovered images: " + ", ".join(rep.uncovered))
    if args.report:
        config = {"command": "propagate", "registry": str(args.registry),
                  "min_inliers": args.min_inliers, "top_k": args.top_k}
        _write_json(args.report, _report(args, config, {
            "propagation": rep.to_dict(),
            "coverage": {"covered": covered, "total": len(reg.images)},
        }))
    return 0


def cmd_analyze(args) -> int:
    reg = load_registry(args.registry)
    frames = load_frames(args.frames)
    gaze = ingest_gaze_log(args.gaze)
    fp = FeatureParams(**reg.build_params.get("features", {}))
    params = SessionParams(
        localize=LocalizeParams(args.top_k, args.min_inliers, args.ratio,
                                RansacParams(inlier_threshold_px=args.ransac_threshold), fp),
        sync_slack_ms=args.sync_slack_ms,
        min_dwell_ms=args.min_dwell_ms,
        dispersion_px=args.dispersion_px,
        min_fixation_ms=args.min_fixation_ms,
        seed=args.seed,
    )
    rec = run_session(reg, gaze, frames, params)
    aoi_ids = [a.aoi_id for a in reg.aois]
    metrics = compute_metrics(rec.fixations, rec.dwells, rec.span_ms, aoi_ids)
    warnings = []
    if rec.n_localized == 0:
        warnings.append("no frame could be localized: dwells are empty and fixations are in scene-camera coordinates")
    elif rec.n_localized < len(rec.observations):
        warnings.append(f"{len(rec.observations) - rec.n_localized} of {len(rec.observations)} frames unlocalized")
    header, values = dwell_rows(metrics, aoi_ids)
    body = {
        "summary": {
            "n_frames": len(rec.observations),
            "n_localized": rec.n_localized,
            "n_gaze_samples": len(gaze),
            "frame_period_ms": rec.frame_period_ms,
            "span_ms": rec.span_ms,
        },
        "metrics": metrics.to_dict(),
        "dwell_table": dict(zip(header, values)),
        "dwells": [d.to_dict() for d in rec.dwells],
        "fixations": [f.to_dict() for f in rec.fixations],
        "trajectory": [{"t_ms": t, **pose.to_dict()} for t, pose in rec.trajectory],
        "frames": [o.to_dict() for o in rec.observations],
        "warnings": warnings,
    }
    config = {
        "command": "analyze",
        "registry": str(args.registry),
        "frames": str(args.frames),
        "gaze": str(args.gaze),
        "session": params.to_dict(),
    }
    _write_json(args.out, _report(args, config, body))
    if args.csv_dir:
        d = Path(args.csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_table_csv(d / "dwell_table.csv", dwell_rows(metrics, aoi_ids))
        write_table_csv(d / "search_metrics.csv", search_rows(metrics))
    print(f"frames localized: {rec.n_localized}/{len(rec.observations)}; "
          f"dwells: {len(rec.dwells)}; fixations: {metrics.fc}")
    for w in warnings:
        print(f"warning: {w}")
    return 0


def cmd_correlate(args) -> int:
    workers = read_worker_metrics(args.workers)
    rows = correlation_table(workers)
    config = {"command": "correlate", "workers": str(args.workers)}
    _write_json(args.out, _report(args, config, {"rows": [r.to_dict() for r in rows]}))
    if args.csv:
        write_table_csv(args.csv, correlation_rows(rows))
    for r in correlation_rows(rows):
        print("\t".join(str(c) for c in r))
    return 0


def cmd_validate(args) -> int:
    system = _read_dwell_table(args.system)
    manual = _read_dwell_table(args.manual)
    res = validation_accuracy(system, manual)
    if args.out:
        config = {"command": "validate", "system": str(args.system), "manual": str(args.manual)}
        _write_json(args.out, _report(args, config, {"validation": res.to_dict()}))
    if args.csv:
        write_table_csv(args.csv, validation_rows(res))
    for r in validation_rows(res):
        print("\t".join(str(c) for c in r))
    print(f"mean accuracy: {res.mean_pct}%")
    return 0


def cmd_synth(args) -> int:
    if args.spec in BUILTIN_SPECS:
        spec = BUILTIN_SPECS[args.spec]()
    else:
        try:
            spec = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise GazemapError(f"cannot read spec {args.spec}: {exc}") from exc
    scene_spec, script = parse_spec(spec)
    if args.seed is not None:
        scene_spec = replace(scene_spec, seed=args.seed)
        script = replace(script, seed=args.seed)
    resolved = {"scene": scene_spec.to_dict(), "script": script.to_dict()}
    scene = generate_scene(scene_spec)
    session = generate_session(scene, script)
    out = Path(args.out)
    truth = write_outputs(out, scene, session, resolved)
    config = {"command": "synth", "spec": str(args.spec), **resolved}
    _write_json(out / "synth_report.json", _report(args, config, {
        "n_views": len(scene.views),
        "n_frames": len(session.frames),
        "n_gaze_samples": int(len(session.gaze_t)),
        "n_truth_dwells": len(truth["dwells"]),
    }))
    print(f"synth: {len(scene.views)} views, {len(session.frames)} frames, "
          f"{len(truth['dwells'])} truth dwells -> {out}")
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="omit the wall-clock timestamp from reports")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")

    p = argparse.ArgumentParser(prog="gazemap", description="Gaze-to-scene registration and visual-search analytics.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"gazemap {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    fd = FeatureParams()
    b = sub.add_parser("build-registry", parents=[common], formatter_class=fmt,
                       help="detect features on reference images and save a registry")
    b.add_argument("--frames", required=True, help="directory of reference images")
    b.add_argument("--out", required=True, help="registry output directory")
    b.add_argument("--poses", help="CSV sidecar image_id,x_m,y_m,z_m,label")
    b.add_argument("--max-keypoints", type=int, default=fd.max_keypoints, help="keypoints kept per image")
    b.add_argument("--threshold", type=float, default=fd.threshold, help="corner response threshold")
    b.add_argument("--detector", choices=["harris", "fast"], default=fd.detector)
    b.add_argument("--levels", type=int, default=fd.n_levels, help="pyramid levels")
    b.add_argument("--scale-factor", type=float, default=fd.scale_factor, help="pyramid scale step")
    b.add_argument("--fast-threshold", type=float, default=fd.fast_threshold, help="FAST intensity threshold (0-255)")
    b.set_defaults(func=cmd_build_registry)

    a = sub.add_parser("annotate", parents=[common], formatter_class=fmt, help="seed an AOI box on a reference image")
    a.add_argument("--registry", required=True)
    a.add_argument("--aoi", help="AOI id")
    a.add_argument("--label", help="hazard label")
    a.add_argument("--image", help="reference image id")
    a.add_argument("--box", help="x0,y0,x1,y1 in pixels")
    a.add_argument("--aois", help="JSON list of {aoi_id, label, image, box} seeds instead of the single-AOI flags")
    a.set_defaults(func=cmd_annotate)

    pr = sub.add_parser("propagate", parents=[common], formatter_class=fmt,
                        help="transfer seeded AOIs to the other reference images")
    pr.add_argument("--registry", required=True)
    pr.add_argument("--min-inliers", type=int, default=15, help="RANSAC inliers needed to link two images")
    pr.add_argument("--top-k", type=int, default=10, help="signature candidates per image")
    pr.add_argument("--report", help="optional JSON coverage report")
    pr.set_defaults(func=cmd_propagate)

    sd, ld = SessionParams(), LocalizeParams()
    an = sub.add_parser("analyze", parents=[common], formatter_class=fmt,
                        help="localize frames, map gaze and compute dwell/search metrics")
    an.add_argument("--registry", required=True)
    an.add_argument("--frames", required=True, help="frames directory with frames.json")
    an.add_argument("--gaze", required=True, help="gaze CSV t_ms,x_px,y_px,valid")
    an.add_argument("--out", required=True, help="report JSON path")
    an.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    an.add_argument("--top-k", type=int, default=ld.top_k, help="signature candidates per frame")
    an.add_argument("--min-inliers", type=int, default=ld.min_inliers, help="RANSAC inliers needed to localize a frame")
    an.add_argument("--ratio", type=float, default=ld.ratio, help="descriptor ratio test")
    an.add_argument("--ransac-threshold", type=float, default=ld.ransac.inlier_threshold_px, help="inlier threshold (px)")
    an.add_argument("--sync-slack-ms", type=float, default=sd.sync_slack_ms,
                    help="max distance from a frame to its gaze sample")
    an.add_argument("--min-dwell-ms", type=float, default=sd.min_dwell_ms, help="shortest reported dwell")
    an.add_argument("--dispersion-px", type=float, default=sd.dispersion_px, help="I-DT dispersion threshold")
    an.add_argument("--min-fixation-ms", type=float, default=sd.min_fixation_ms, help="shortest fixation")
    an.add_argument("--csv-dir", help="also write dwell and search-metric tables as CSV")
    an.set_defaults(func=cmd_analyze)

    c = sub.add_parser("correlate", parents=[common], formatter_class=fmt,
                       help="Pearson r and p of each search metric against AV_HRI")
    c.add_argument("--workers", required=True, help="CSV worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr")
    c.add_argument("--out", required=True, help="report JSON path")
    c.add_argument("--csv", help="also write the table as CSV")
    c.set_defaults(func=cmd_correlate)

    v = sub.add_parser("validate", parents=[common], formatter_class=fmt,
                       help="accuracy of system dwell times against manual counts")
    v.add_argument("--system", required=True, help="JSON mapping, analyze report, or aoi_id,dwell_ms CSV")
    v.add_argument("--manual", required=True, help="JSON mapping or aoi_id,dwell_ms CSV")
    v.add_argument("--out", help="report JSON path")
    v.add_argument("--csv", help="also write the table as CSV")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("synth", parents=[common], formatter_class=fmt,
                       help="render a synthetic scene, session and ground truth")
    s.add_argument("--spec", default="default", help="spec JSON file, or 'default' / 'case-study'")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="override scene and script seeds")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GazemapError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
