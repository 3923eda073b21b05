"""Command-line pipeline: synth -> attribute -> xc -> match -> eval -> train-meta.

Artifact layout for a frame store (written by `synth`, read downstream):

    store/
      scene.json      generator spec (includes the grid)
      model.json      toy detector weights
      manifest.json   planted TP/FP accounting + suggested a_thresh
      preds.jsonl     detections with frame ids
      gts.jsonl       ground truths with frame ids
      frames/<id>.xcam   pseudo image per frame (XCAM container)

Exit codes: 0 success, 2 usage problems, 1 data problems (bad files, failed
invariants). A JSON config given via --config overrides any flag of that
subcommand; XCKIT_JOBS is the fallback for --jobs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

import numpy as np

from .attribution import AttributionMap
from .errors import ParseError, XckitError
from .io_formats import (
    DetectionRecord,
    load_model,
    load_scene_spec,
    read_detections,
    read_feature_csv,
    read_ground_truths,
    read_xcam,
    save_model,
    save_scene_spec,
    scene_spec_from_dict,
    write_detections,
    write_feature_csv,
    write_ground_truths,
    write_xcam,
)
from .matching import DEFAULT_IOU_THRESH, MatchConfig, categorize
from .meta import DEFAULT_FEATURES, MetaTrainConfig, build_feature_dataset, cross_validate
from .metrics import evaluate_feature, render_table
from .synth import (
    BENCHMARK_A_THRESH,
    SceneSpec,
    build_toy_model,
    frame_attributions,
    generate_benchmark,
)
from .xc import XcConfig

EVAL_FEATURES = (
    "top_score",
    "xc_s_plus", "xc_c_plus", "xc_s_minus", "xc_c_minus",
    "n_points",
    "random",
)


class UsageError(Exception):
    pass


def _parse_iou_spec(text: str) -> Dict[str, float]:
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"--iou entries must look like label=thresh, got {part!r}")
        label, _, val = part.partition("=")
        try:
            out[label.strip()] = float(val)
        except ValueError:
            raise UsageError(f"--iou threshold for {label.strip()!r} is not a number")
    if not out:
        raise UsageError("--iou needs at least one label=thresh entry")
    return out


def _resolve_jobs(value: Optional[int]) -> int:
    if value is None:
        env = os.environ.get("XCKIT_JOBS")
        if env is not None:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"XCKIT_JOBS must be an integer, got {env!r}")
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise UsageError("--jobs must be >= 1")
    return value


def _apply_config(args: argparse.Namespace) -> None:
    """Values in --config override flags, per the interface contract."""
    path = getattr(args, "config", None)
    if not path:
        return
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(e.lineno, f"bad config: {e.msg}")
    if not isinstance(cfg, dict):
        raise UsageError("--config must hold a JSON object")
    for key, val in cfg.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"config key {key!r} is not a flag of this subcommand")
        setattr(args, attr, val)


# --- frame store helpers ---

def _frame_id(i: int) -> str:
    return f"{i:06d}"


def write_frame_store(out_dir, spec, frames, manifest) -> None:
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    save_scene_spec(os.path.join(out_dir, "scene.json"), spec)
    model = frames[0].model if frames else build_toy_model(spec.grid)
    save_model(os.path.join(out_dir, "model.json"), model)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    det_records = []
    gt_records = []
    for i, frame in enumerate(frames):
        fid = _frame_id(i)
        for pred in frame.preds:
            det_records.append(DetectionRecord(frame_id=fid, detection=pred))
        for gt in frame.gts:
            gt_records.append((fid, gt))
        write_xcam(
            os.path.join(out_dir, "frames", f"{fid}.xcam"),
            AttributionMap(values=frame.pseudo_image.astype(np.float64), method="pseudo-image"),
        )
    write_detections(os.path.join(out_dir, "preds.jsonl"), det_records)
    write_ground_truths(os.path.join(out_dir, "gts.jsonl"), gt_records)


def read_frame_store(store_dir):
    """Returns (spec, ordered frame ids, {fid: (pseudo, preds, gts)})."""
    spec = load_scene_spec(os.path.join(store_dir, "scene.json"))
    by_frame: Dict[str, dict] = {}
    for rec in read_detections(os.path.join(store_dir, "preds.jsonl")):
        by_frame.setdefault(rec.frame_id, {"preds": [], "gts": []})["preds"].append(
            rec.detection
        )
    for fid, gt in read_ground_truths(os.path.join(store_dir, "gts.jsonl")):
        by_frame.setdefault(fid, {"preds": [], "gts": []})["gts"].append(gt)
    frames_dir = os.path.join(store_dir, "frames")
    for name in os.listdir(frames_dir):
        if name.endswith(".xcam"):
            by_frame.setdefault(name[:-5], {"preds": [], "gts": []})
    fids = sorted(by_frame)
    out = {}
    for fid in fids:
        pseudo_path = os.path.join(frames_dir, f"{fid}.xcam")
        if not os.path.exists(pseudo_path):
            raise XckitError(f"frame {fid} has records but no pseudo image")
        pseudo = read_xcam(pseudo_path).values.astype(np.float32)
        out[fid] = (pseudo, by_frame[fid]["preds"], by_frame[fid]["gts"])
    return spec, fids, out


# --- subcommands ---

def _cmd_synth(args) -> int:
    spec = load_scene_spec(args.spec) if args.spec else SceneSpec()
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, rng_seed=args.seed)
    frames, manifest = generate_benchmark(spec, args.frames)
    write_frame_store(args.out, spec, frames, manifest)
    print(
        f"wrote {len(frames)} frames, "
        f"{sum(manifest['tp_counts'].values())} tp / "
        f"{sum(manifest['fp_counts'].values())} fp predictions -> {args.out}"
    )
    return 0


class _FrameShim:
    """Adapts store contents to frame_attributions' field expectations."""

    __slots__ = ("pseudo_image", "preds", "model")

    def __init__(self, pseudo_image, preds, model):
        self.pseudo_image = pseudo_image
        self.preds = preds
        self.model = model


def _cmd_attribute(args) -> int:
    spec, fids, store = read_frame_store(args.frames)
    model_path = args.model or os.path.join(args.frames, "model.json")
    model = load_model(model_path)
    os.makedirs(args.out, exist_ok=True)
    jobs = _resolve_jobs(args.jobs)

    def one_frame(fid):
        pseudo, preds, _ = store[fid]
        for pred in preds:
            if pred.anchor_index is None:
                raise XckitError(
                    f"frame {fid}: prediction lacks anchor_index; cannot pick its output"
                )
        shim = _FrameShim(pseudo, preds, model)
        return frame_attributions(shim, method=args.method, steps=args.steps)

    if jobs == 1:
        per_frame = [one_frame(fid) for fid in fids]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_frame = list(pool.map(one_frame, fids))
    n = 0
    for fid, maps in zip(fids, per_frame):
        for i, m in enumerate(maps):
            write_xcam(os.path.join(args.out, f"{fid}_{i:03d}.xcam"), m)
            n += 1
    print(f"wrote {n} attribution maps ({args.method}) -> {args.out}")
    return 0


def _cmd_xc(args) -> int:
    spec, fids, store = read_frame_store(args.frames)
    xc_cfg = XcConfig(a_thresh=args.a_thresh, margin_m=args.margin)
    match_cfg = MatchConfig(
        score_thresh=args.score_thresh,
        iou_thresh=_parse_iou_spec(args.iou) if args.iou else dict(DEFAULT_IOU_THRESH),
    )
    triples = []
    for fid in fids:
        pseudo, preds, gts = store[fid]
        maps = []
        for i in range(len(preds)):
            path = os.path.join(args.attribs, f"{fid}_{i:03d}.xcam")
            if not os.path.exists(path):
                raise XckitError(f"missing attribution map {path}")
            maps.append(read_xcam(path))
        triples.append((preds, maps, gts))
    rows = build_feature_dataset(triples, spec.grid, xc_cfg=xc_cfg, match_cfg=match_cfg)
    write_feature_csv(args.out, rows)
    print(f"wrote {len(rows)} feature rows -> {args.out}")
    return 0


def _cmd_match(args) -> int:
    by_frame: Dict[str, dict] = {}
    for rec in read_detections(args.preds):
        by_frame.setdefault(rec.frame_id, {"preds": [], "gts": []})["preds"].append(
            rec.detection
        )
    for fid, gt in read_ground_truths(args.gts):
        by_frame.setdefault(fid, {"preds": [], "gts": []})["gts"].append(gt)
    cfg = MatchConfig(
        score_thresh=args.score_thresh,
        iou_thresh=_parse_iou_spec(args.iou) if args.iou else dict(DEFAULT_IOU_THRESH),
    )
    counts = {"TP": 0, "FP": 0, "Ignore": 0}
    with open(args.out, "w") as f:
        for fid in sorted(by_frame):
            entry = by_frame[fid]
            outcome = categorize(entry["preds"], entry["gts"], cfg)
            for i, (tag, gt_idx) in enumerate(zip(outcome.tags, outcome.matched_gt)):
                counts[tag] += 1
                f.write(
                    json.dumps(
                        {"frame_id": fid, "index": i, "tag": tag, "matched_gt": gt_idx}
                    )
                    + "\n"
                )
    print(
        f"tagged {sum(counts.values())} predictions "
        f"({counts['TP']} TP, {counts['FP']} FP, {counts['Ignore']} Ignore) -> {args.out}"
    )
    return 0


def _group_predicates(tokens: List[str], rows):
    """Build (name, predicate) pairs from --group-by tokens."""
    groups = [("", None)]  # overall row first
    want_class = "class" in tokens
    want_points = "points100" in tokens
    unknown = set(tokens) - {"class", "points100", ""}
    if unknown:
        raise UsageError(f"unknown --group-by tokens: {sorted(unknown)}")
    labels = sorted({r.pred_label for r in rows})
    if want_class and want_points:
        for lab in labels:
            for name, pred in (
                (f"{lab},<100", lambda r, lab=lab: r.pred_label == lab and r.n_points < 100),
                (f"{lab},>=100", lambda r, lab=lab: r.pred_label == lab and r.n_points >= 100),
            ):
                groups.append((name, pred))
    elif want_class:
        for lab in labels:
            groups.append((lab, lambda r, lab=lab: r.pred_label == lab))
    elif want_points:
        groups.append(("<100", lambda r: r.n_points < 100))
        groups.append((">=100", lambda r: r.n_points >= 100))
    return groups


def _cmd_eval(args) -> int:
    rows = read_feature_csv(args.features)
    tokens = [t.strip() for t in (args.group_by or "").split(",") if t.strip()]
    groups = _group_predicates(tokens, rows)
    reports = []
    for feature in EVAL_FEATURES:
        for name, pred in groups:
            try:
                reports.append(
                    evaluate_feature(
                        rows, feature, group=pred, group_name=name, rng_seed=args.seed
                    )
                )
            except XckitError:
                # a group can be single-class or empty; skip its row
                continue
    table = render_table(reports)
    if args.out:
        with open(args.out, "w") as f:
            f.write(table + "\n")
    print(table)
    return 0


def _cmd_train_meta(args) -> int:
    rows = read_feature_csv(args.features)
    subset = (
        [t.strip() for t in args.subset.split(",") if t.strip()]
        if args.subset
        else list(DEFAULT_FEATURES)
    )
    bad = set(subset) - set(DEFAULT_FEATURES)
    if bad:
        raise UsageError(f"unknown meta features: {sorted(bad)}")
    report = cross_validate(rows, feature_subset=subset, rng_seed=args.seed)
    lines = [
        f"features: {report.feature}",
        f"rows: {len(rows)} ({report.n_pos} tp / {report.n_neg} fp)",
        f"protocol: {MetaTrainConfig().repeats}x{MetaTrainConfig().folds}-fold cross-validation",
        f"auroc: {report.auroc:.4f}",
        f"aupr: {report.aupr:.4f}",
        f"aupr_op: {report.aupr_op:.4f}",
    ]
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def _cmd_pipeline(args) -> int:
    with open(args.config) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(e.lineno, f"bad pipeline config: {e.msg}")
    if not isinstance(cfg, dict):
        raise UsageError("pipeline config must be a JSON object")
    out_dir = cfg.get("out")
    if not out_dir:
        raise UsageError("pipeline config needs an 'out' directory")
    os.makedirs(out_dir, exist_ok=True)

    try:
        spec = scene_spec_from_dict(cfg.get("scene", {}))
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"bad scene section in pipeline config: {e}")
    store_dir = os.path.join(out_dir, "store")
    attribs_dir = os.path.join(out_dir, "attribs")
    features_csv = os.path.join(out_dir, "features.csv")
    table_txt = os.path.join(out_dir, "table.txt")
    tags_jsonl = os.path.join(out_dir, "tags.jsonl")
    report_txt = os.path.join(out_dir, "meta_report.txt")

    n_frames = int(cfg.get("n_frames", 20))
    frames, manifest = generate_benchmark(spec, n_frames)
    write_frame_store(store_dir, spec, frames, manifest)

    att = cfg.get("attribute", {})
    rc = main(
        [
            "attribute",
            "--frames", store_dir,
            "--out", attribs_dir,
            "--method", att.get("method", "backprop"),
            "--steps", str(att.get("steps", 32)),
            "--jobs", str(att.get("jobs", 1)),
        ]
    )
    if rc:
        return rc

    xc_cfg = cfg.get("xc", {})
    rc = main(
        [
            "xc",
            "--frames", store_dir,
            "--attribs", attribs_dir,
            "--a-thresh", str(xc_cfg.get("a_thresh", manifest["a_thresh"])),
            "--margin", str(xc_cfg.get("margin", 0.2)),
            "--out", features_csv,
        ]
    )
    if rc:
        return rc

    rc = main(
        [
            "match",
            "--preds", os.path.join(store_dir, "preds.jsonl"),
            "--gts", os.path.join(store_dir, "gts.jsonl"),
            "--out", tags_jsonl,
        ]
    )
    if rc:
        return rc

    ev = cfg.get("eval", {})
    rc = main(
        [
            "eval",
            "--features", features_csv,
            "--group-by", ev.get("group_by", ""),
            "--seed", str(ev.get("seed", 0)),
            "--out", table_txt,
        ]
    )
    if rc:
        return rc

    tm = cfg.get("train_meta", {})
    if tm.get("enabled", True):
        argv = ["train-meta", "--features", features_csv,
                "--seed", str(tm.get("seed", 0)), "--out", report_txt]
        if tm.get("subset"):
            argv += ["--subset", ",".join(tm["subset"])]
        rc = main(argv)
        if rc:
            return rc
    print(f"pipeline complete -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xckit",
        description="attribution-concentration scoring for grid-input detectors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic frame store")
    p.add_argument("--spec", help="scene spec JSON (defaults baked in when omitted)")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--seed", type=int, default=None, help="override the spec's rng_seed")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("attribute", help="attribution map per prediction")
    p.add_argument("--model", help="model JSON (default: the store's model.json)")
    p.add_argument("--frames", required=True, help="frame store directory")
    p.add_argument("--method", choices=["backprop", "ig", "ig-nomult"], default="backprop")
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--targets", choices=["top-class"], default="top-class")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_attribute)

    p = sub.add_parser("xc", help="concentration scores -> feature CSV")
    p.add_argument("--frames", required=True)
    p.add_argument("--attribs", required=True)
    p.add_argument("--a-thresh", type=float, default=0.1)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--score-thresh", type=float, default=0.1)
    p.add_argument("--iou", default=None,
                   help="per-class IoU thresholds, e.g. car=0.5,pedestrian=0.25")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_xc)

    p = sub.add_parser("match", help="tag predictions TP/FP/Ignore")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--score-thresh", type=float, default=0.1)
    p.add_argument("--iou", default="car=0.5,pedestrian=0.25,cyclist=0.25")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("eval", help="threshold-independent metrics table")
    p.add_argument("--features", required=True)
    p.add_argument("--group-by", default="",
                   help="comma list of class, points100; empty = overall only")
    p.add_argument("--seed", type=int, default=0, help="seed for the random baseline")
    p.add_argument("--out", default=None)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("train-meta", help="cross-validated meta-classifier report")
    p.add_argument("--features", required=True)
    p.add_argument("--subset", default=None,
                   help="comma list of meta features (default: all five)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train_meta)

    p = sub.add_parser("pipeline", help="run every stage from one config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command != "pipeline":
            _apply_config(args)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except ParseError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 1
    except XckitError as e:
        print(f"data error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
