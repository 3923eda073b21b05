"""File formats: XCAM attribution maps, JSONL box streams, feature CSVs, configs.

XCAM layout (all integers little-endian):

    offset  size  field
    0       4     magic b"XCAM"
    4       2     version (u16), currently 1
    6       4     H (u32)
    10      4     W (u32)
    14      4     C (u32)
    18      4*H*W*C   payload, float32 little-endian, row-major (y, x, c)
    ...     4     metadata length (u32)
    ...     n     metadata, UTF-8 JSON: method, target box/class, ig steps

The payload is 32-bit by format definition, so round-trips are bit-identical
exactly when the map's values are float32-representable; higher-precision
values are rounded once on write. Text formats use Python's shortest
round-trip float repr and are lossless.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional

import numpy as np

from .attribution import AttributionMap, AttributionTarget
from .autodiff import ModelGraph, build_model, model_to_spec
from .errors import BadMagic, ParseError, TruncatedPayload, VersionUnsupported, XckitError
from .geometry import Box3D, GridMeta
from .matching import Detection, GroundTruth
from .meta import FeatureRow
from .synth import ConcentrationProfile, SceneSpec

XCAM_MAGIC = b"XCAM"
XCAM_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


def write_xcam(path, map: AttributionMap) -> None:
    values = np.asarray(map.values)
    if values.ndim != 3:
        raise XckitError(f"xcam payload must be 3-d (H, W, C), got shape {values.shape}")
    h, w, c = values.shape
    meta = {"method": map.method}
    if map.steps is not None:
        meta["steps"] = int(map.steps)
    if map.target is not None:
        meta["target"] = {
            "box_index": map.target.box_index,
            "class_index": map.target.class_index,
        }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(XCAM_MAGIC, XCAM_VERSION, h, w, c))
        f.write(values.astype("<f4").tobytes(order="C"))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def read_xcam(path) -> AttributionMap:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"file is {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, h, w, c = _HEADER.unpack_from(raw)
    if magic != XCAM_MAGIC:
        raise BadMagic(f"magic {magic!r} != {XCAM_MAGIC!r}")
    if version != XCAM_VERSION:
        raise VersionUnsupported(f"version {version}, reader supports {XCAM_VERSION}")
    n_payload = 4 * h * w * c
    offset = _HEADER.size
    if len(raw) < offset + n_payload + 4:
        raise TruncatedPayload(
            f"payload+metadata need {n_payload + 4} bytes after header, "
            f"have {len(raw) - offset}"
        )
    values = (
        np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=offset)
        .reshape(h, w, c)
        .astype(np.float64)
    )
    offset += n_payload
    (meta_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if len(raw) < offset + meta_len:
        raise TruncatedPayload(f"metadata block truncated ({len(raw) - offset}/{meta_len})")
    meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    target = None
    if "target" in meta:
        target = AttributionTarget(
            box_index=meta["target"].get("box_index"),
            class_index=meta["target"].get("class_index"),
        )
    return AttributionMap(
        values=values,
        method=meta.get("method", "unknown"),
        target=target,
        steps=meta.get("steps"),
    )


# --- JSONL box streams ---

@dataclass
class DetectionRecord:
    """One prediction tied to its frame, as persisted."""

    frame_id: str
    detection: Detection


def _box_to_list(box: Box3D) -> list:
    return [box.cx, box.cy, box.cz, box.dx, box.dy, box.dz, box.yaw]


def _box_from_list(vals, line_no) -> Box3D:
    if not isinstance(vals, list) or len(vals) != 7:
        raise ParseError(line_no, f"box must be a 7-element array, got {vals!r}")
    try:
        return Box3D(*[float(v) for v in vals])
    except (TypeError, ValueError, XckitError) as e:
        raise ParseError(line_no, f"bad box: {e}")


def write_detections(path, records: Iterable[DetectionRecord]) -> None:
    with open(path, "w") as f:
        for rec in records:
            d = rec.detection
            row = {
                "frame_id": rec.frame_id,
                "box": _box_to_list(d.box),
                "label": d.label,
                "scores": d.scores,
                "n_points": d.n_points,
                "distance": d.distance,
            }
            if d.anchor_index is not None:
                row["anchor_index"] = d.anchor_index
            f.write(json.dumps(row) + "\n")


def read_detections(path) -> Iterator[DetectionRecord]:
    """Stream records one line at a time; malformed lines carry their number."""
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"bad record: {e.msg}")
            for key in ("frame_id", "box", "label", "scores", "n_points"):
                if key not in row:
                    raise ParseError(line_no, f"missing field {key!r}")
            if not isinstance(row["scores"], dict):
                raise ParseError(line_no, "scores must be an object")
            det = Detection(
                box=_box_from_list(row["box"], line_no),
                label=str(row["label"]),
                scores={str(k): float(v) for k, v in row["scores"].items()},
                n_points=int(row["n_points"]),
                distance=None if row.get("distance") is None else float(row["distance"]),
                anchor_index=row.get("anchor_index"),
            )
            yield DetectionRecord(frame_id=str(row["frame_id"]), detection=det)


def write_ground_truths(path, records: Iterable[tuple]) -> None:
    """Write (frame_id, GroundTruth) pairs as JSONL."""
    with open(path, "w") as f:
        for frame_id, gt in records:
            f.write(
                json.dumps(
                    {"frame_id": frame_id, "box": _box_to_list(gt.box), "label": gt.label}
                )
                + "\n"
            )


def read_ground_truths(path) -> Iterator[tuple]:
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"bad record: {e.msg}")
            for key in ("frame_id", "box", "label"):
                if key not in row:
                    raise ParseError(line_no, f"missing field {key!r}")
            yield str(row["frame_id"]), GroundTruth(
                box=_box_from_list(row["box"], line_no), label=str(row["label"])
            )


# --- feature dataset CSV ---

FEATURE_CSV_COLUMNS = [
    "top_score",
    "xc_s_plus", "xc_c_plus", "xc_s_minus", "xc_c_minus",
    "xc_s_plus_valid", "xc_c_plus_valid", "xc_s_minus_valid", "xc_c_minus_valid",
    "n_points", "distance", "pred_label", "is_tp",
]


def write_feature_csv(path, rows: Iterable[FeatureRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(FEATURE_CSV_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    repr(r.top_score),
                    repr(r.xc_s_plus), repr(r.xc_c_plus),
                    repr(r.xc_s_minus), repr(r.xc_c_minus),
                    int(r.xc_s_plus_valid), int(r.xc_c_plus_valid),
                    int(r.xc_s_minus_valid), int(r.xc_c_minus_valid),
                    r.n_points,
                    repr(r.distance),
                    r.pred_label,
                    int(r.is_tp),
                ]
            )


def read_feature_csv(path) -> List[FeatureRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "missing header row")
        if header != FEATURE_CSV_COLUMNS:
            raise ParseError(1, f"unexpected header {header!r}")
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != len(FEATURE_CSV_COLUMNS):
                raise ParseError(
                    line_no, f"expected {len(FEATURE_CSV_COLUMNS)} fields, got {len(rec)}"
                )
            try:
                rows.append(
                    FeatureRow(
                        top_score=float(rec[0]),
                        xc_s_plus=float(rec[1]), xc_c_plus=float(rec[2]),
                        xc_s_minus=float(rec[3]), xc_c_minus=float(rec[4]),
                        xc_s_plus_valid=bool(int(rec[5])),
                        xc_c_plus_valid=bool(int(rec[6])),
                        xc_s_minus_valid=bool(int(rec[7])),
                        xc_c_minus_valid=bool(int(rec[8])),
                        n_points=int(rec[9]),
                        distance=float(rec[10]),
                        pred_label=rec[11],
                        is_tp=bool(int(rec[12])),
                    )
                )
            except ValueError as e:
                raise ParseError(line_no, str(e))
    return rows


# --- config / model JSON ---

def save_model(path, model: ModelGraph) -> None:
    with open(path, "w") as f:
        json.dump(model_to_spec(model), f)


def load_model(path) -> ModelGraph:
    with open(path) as f:
        return build_model(json.load(f))


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    g = spec.grid
    return {
        "grid": {
            "height": g.height, "width": g.width,
            "origin_x": g.origin_x, "origin_y": g.origin_y,
            "pixel_size": g.pixel_size,
        },
        "n_objects": dict(spec.n_objects),
        "size_ranges": {k: [list(r) for r in v] for k, v in spec.size_ranges.items()},
        "fp_rate": spec.fp_rate,
        "concentration_profile": {
            "tp_inside": spec.concentration_profile.tp_inside,
            "fp_inside": spec.concentration_profile.fp_inside,
        },
        "points_base": spec.points_base,
        "points_delta": spec.points_delta,
        "points_correlation": spec.points_correlation,
        "rng_seed": spec.rng_seed,
    }


def scene_spec_from_dict(d: dict) -> SceneSpec:
    kwargs = {}
    if "grid" in d:
        kwargs["grid"] = GridMeta(**d["grid"])
    if "n_objects" in d:
        kwargs["n_objects"] = {str(k): int(v) for k, v in d["n_objects"].items()}
    if "size_ranges" in d:
        kwargs["size_ranges"] = {
            k: tuple(tuple(float(x) for x in r) for r in v)
            for k, v in d["size_ranges"].items()
        }
    if "concentration_profile" in d:
        kwargs["concentration_profile"] = ConcentrationProfile(**d["concentration_profile"])
    for key in ("fp_rate", "points_correlation"):
        if key in d:
            kwargs[key] = float(d[key])
    for key in ("points_base", "points_delta", "rng_seed"):
        if key in d:
            kwargs[key] = int(d[key])
    return SceneSpec(**kwargs)


def save_scene_spec(path, spec: SceneSpec) -> None:
    with open(path, "w") as f:
        json.dump(scene_spec_to_dict(spec), f, indent=2)


def load_scene_spec(path) -> SceneSpec:
    with open(path) as f:
        d = json.load(f)
    if not isinstance(d, dict):
        raise ParseError(1, "scene spec must be a JSON object")
    try:
        return scene_spec_from_dict(d)
    except (TypeError, ValueError, KeyError) as e:
        raise ParseError(1, f"bad scene spec: {e}")
