"""Synthetic BEV frames with an analytic toy detector.

A frame is a 4-channel pseudo image (channels 0-2 carry per-class signal,
channel 3 carries an inhibition signal that produces negative attributions)
plus planted ground truths and predictions. The detector is fixed-form:

* conv1 (3x3, per-channel, tiny off-center weights) with a negative bias, so
  the relu behind it opens only at pixels where signal was actually planted;
  gradients vanish everywhere else.
* conv2 (1x1 identity gain) to complete the two-conv trunk.
* a dense per-anchor head: each 10x10-pixel block owns one anchor with one
  logit per class, weighting its own block strongly and the rest of the
  image weakly, minus an inhibition-channel term; sigmoid on top.

Signal placement follows the concentration profile: a TP-like prediction
gets most of its pixel budget inside its (predicted) box, an FP-like one
scatters most of it around the box inside the same anchor block. Attribution
maps of the toy model therefore concentrate inside boxes exactly when the
planted signal does.

All magnitudes below are calibrated together; BENCHMARK_A_THRESH sits
between the largest spurious attribution (weak context weights, conv bleed)
and the smallest legitimate one (inhibition path at the lowest sigmoid
slope). The toy scale differs from a real detector's, so the significance
threshold here is intentionally much smaller than the library default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attribution import (
    AttributionMap,
    AttributionTarget,
    backprop_saliency,
    integrated_gradients,
    modified_integrated_gradients,
)
from .autodiff import ModelGraph, Tensor, build_model, forward
from .errors import PlacementFailure, XckitError
from .geometry import Box3D, GridMeta, enlarge, membership_mask, project_to_bev, wrap_angle
from .matching import DEFAULT_IOU_THRESH, Detection, GroundTruth
from .meta import FeatureRow

CLASSES = ("car", "pedestrian", "cyclist")

BLOCK_PX = 10          # anchor block edge, in pixels
SIGNAL = 1.0           # planted per-pixel class-channel value (jittered +/-10%)
# small objects plant few pixels; extra amplitude keeps their logits above
# the context leak from large objects (gradients are amplitude-independent
# wherever the relu gate is open, so this does not move attribution scales)
SIGNAL_AMP = {"car": 1.0, "pedestrian": 3.5, "cyclist": 2.2}
INHIB_FRACTION = 0.5   # channel-3 value relative to the class signal
FP_AMPLITUDE = 0.8     # FP clutter is slightly dimmer than object signal
CONV_OFFCENTER = 0.002
GATE_BIAS = 0.3        # conv1 bias (class channels); relu opens only on signal
GATE_BIAS_INHIB = 0.15
W_IN = 0.034           # head weight inside the anchor's own block
W_CTX = W_IN / 20.0    # weak full-image context coupling
W_INHIB_IN = 0.017
W_INHIB_CTX = W_INHIB_IN / 20.0
HEAD_BIAS = -0.4

# significance threshold matched to the toy attribution scale (see module doc)
BENCHMARK_A_THRESH = 0.0015

DEFAULT_SIZE_RANGES = {
    "car": ((3.9, 4.7), (1.6, 2.0), (1.4, 1.6)),
    "pedestrian": ((0.5, 0.8), (0.5, 0.8), (1.6, 1.8)),
    "cyclist": ((1.6, 2.0), (0.5, 0.7), (1.6, 1.8)),
}


@dataclass(frozen=True)
class ConcentrationProfile:
    """Fraction of each prediction's pixel budget planted inside its box."""

    tp_inside: float = 0.9
    fp_inside: float = 0.3

    def __post_init__(self):
        for f in (self.tp_inside, self.fp_inside):
            if not 0.0 <= f <= 1.0:
                raise XckitError(f"concentration fractions must be in [0,1], got {f}")


def default_grid() -> GridMeta:
    return GridMeta(height=40, width=40, origin_x=-8.0, origin_y=-8.0, pixel_size=0.4)


@dataclass(frozen=True)
class SceneSpec:
    grid: GridMeta = field(default_factory=default_grid)
    n_objects: Dict[str, int] = field(
        default_factory=lambda: {"car": 2, "pedestrian": 1, "cyclist": 1}
    )
    size_ranges: Dict[str, tuple] = field(default_factory=lambda: dict(DEFAULT_SIZE_RANGES))
    fp_rate: float = 0.25
    concentration_profile: ConcentrationProfile = field(default_factory=ConcentrationProfile)
    points_base: int = 300
    points_delta: int = 100
    points_correlation: float = 0.4
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fp_rate <= 1.0:
            raise XckitError(f"fp_rate must be in [0,1], got {self.fp_rate}")
        if any(n < 0 for n in self.n_objects.values()):
            raise XckitError("object counts must be >= 0")
        if not 0.0 < self.points_correlation < 1.0:
            raise XckitError("points_correlation must be in (0,1)")
        if self.grid.height % BLOCK_PX or self.grid.width % BLOCK_PX:
            raise XckitError(f"grid dimensions must be multiples of {BLOCK_PX}")


@dataclass
class SyntheticFrame:
    pseudo_image: np.ndarray  # (H, W, 4) float32
    gts: List[GroundTruth]
    preds: List[Detection]
    model: ModelGraph


def _anchor_layout(grid: GridMeta) -> Tuple[int, int]:
    return grid.height // BLOCK_PX, grid.width // BLOCK_PX


def n_anchors(grid: GridMeta) -> int:
    by, bx = _anchor_layout(grid)
    return by * bx


def output_index(anchor_index: int, class_name: str) -> int:
    return anchor_index * len(CLASSES) + CLASSES.index(class_name)


def build_toy_model(grid: GridMeta) -> ModelGraph:
    """Deterministic analytic detector for the given grid (no RNG involved)."""
    h, w = grid.height, grid.width
    nby, nbx = _anchor_layout(grid)
    n_out = nby * nbx * len(CLASSES)

    conv1_w = np.full((3, 3, 4, 4), 0.0, dtype=np.float32)
    for c in range(4):
        conv1_w[:, :, c, c] = CONV_OFFCENTER
        conv1_w[1, 1, c, c] = 1.0
    conv1_b = np.array([-GATE_BIAS] * 3 + [-GATE_BIAS_INHIB], dtype=np.float32)

    conv2_w = np.zeros((1, 1, 4, 4), dtype=np.float32)
    for c in range(4):
        conv2_w[0, 0, c, c] = 1.0
    conv2_b = np.zeros(4, dtype=np.float32)

    head = np.zeros((h * w * 4, n_out), dtype=np.float32)
    ys, xs = np.divmod(np.arange(h * w), w)
    block_of_pixel = (ys // BLOCK_PX) * nbx + (xs // BLOCK_PX)  # (h*w,)
    for a in range(nby * nbx):
        in_block = block_of_pixel == a
        for k in range(len(CLASSES)):
            col = a * len(CLASSES) + k
            wk = np.where(in_block, W_IN, W_CTX)
            w3 = np.where(in_block, -W_INHIB_IN, -W_INHIB_CTX)
            head[k::4, col] = wk
            head[3::4, col] = w3
    head_b = np.full(n_out, HEAD_BIAS, dtype=np.float32)

    return build_model(
        {
            "input_shape": [h, w, 4],
            "layers": [
                {"kind": "conv2d", "in_channels": 4, "out_channels": 4, "kernel": [3, 3],
                 "weight": conv1_w, "bias": conv1_b},
                {"kind": "relu"},
                {"kind": "conv2d", "in_channels": 4, "out_channels": 4, "kernel": [1, 1],
                 "weight": conv2_w, "bias": conv2_b},
                {"kind": "dense", "in_features": h * w * 4, "out_features": n_out,
                 "weight": head, "bias": head_b},
                {"kind": "sigmoid"},
            ],
        }
    )


def _block_bounds_m(grid: GridMeta, anchor: int):
    nby, nbx = _anchor_layout(grid)
    by, bx = divmod(anchor, nbx)
    x0 = grid.origin_x + bx * BLOCK_PX * grid.pixel_size
    y0 = grid.origin_y + by * BLOCK_PX * grid.pixel_size
    side = BLOCK_PX * grid.pixel_size
    return x0, y0, side


def _block_pixel_mask(grid: GridMeta, anchor: int) -> np.ndarray:
    nby, nbx = _anchor_layout(grid)
    by, bx = divmod(anchor, nbx)
    mask = np.zeros((grid.height, grid.width), dtype=bool)
    mask[by * BLOCK_PX : (by + 1) * BLOCK_PX, bx * BLOCK_PX : (bx + 1) * BLOCK_PX] = True
    return mask


def _points_sigma(spec: SceneSpec) -> float:
    """Noise scale making corr(n_points, is_tp) hit the configured target.

    Solved from the point-biserial identity with the expected TP share
    p = 1 - fp_rate: rho = delta*sqrt(pq) / sqrt(delta^2*pq + sigma^2).
    """
    p = 1.0 - spec.fp_rate
    q = spec.fp_rate
    if p <= 0 or q <= 0:
        return float(spec.points_delta)  # correlation undefined; any scale works
    rho = spec.points_correlation
    return float(spec.points_delta * math.sqrt(p * q * (1.0 / rho**2 - 1.0)))


_MAX_ATTEMPTS = 1000


def _sample_box(rng, spec, anchor, label) -> Box3D:
    (dxr, dyr, dzr) = spec.size_ranges[label]
    x0, y0, side = _block_bounds_m(spec.grid, anchor)
    jitter = side / 2.0 - 0.8 * spec.grid.pixel_size
    return Box3D(
        cx=x0 + side / 2.0 + float(rng.uniform(-jitter, jitter)) * 0.5,
        cy=y0 + side / 2.0 + float(rng.uniform(-jitter, jitter)) * 0.5,
        cz=0.0,
        dx=float(rng.uniform(*dxr)),
        dy=float(rng.uniform(*dyr)),
        dz=float(rng.uniform(*dzr)),
        yaw=wrap_angle(float(rng.uniform(-math.pi, math.pi))),
    )


def _jitter_box(rng, box: Box3D) -> Box3D:
    return Box3D(
        cx=box.cx + float(rng.normal(0, 0.12)),
        cy=box.cy + float(rng.normal(0, 0.12)),
        cz=box.cz,
        dx=box.dx * float(rng.uniform(0.92, 1.08)),
        dy=box.dy * float(rng.uniform(0.92, 1.08)),
        dz=box.dz,
        yaw=wrap_angle(box.yaw + float(rng.normal(0, 0.04))),
    )


def generate_frame(spec: SceneSpec, model: Optional[ModelGraph] = None) -> SyntheticFrame:
    """Build one deterministic frame: boxes, planted signal, scored predictions.

    ``model`` lets callers share one toy detector across frames; it must have
    been built for the same grid. When omitted, a fresh (identical) one is
    built here.
    """
    from .geometry import iou_3d  # local import keeps the module header lean

    grid = spec.grid
    rng = np.random.default_rng(spec.rng_seed)
    if model is None:
        model = build_toy_model(grid)
    total = n_anchors(grid)

    slots = []  # (label, is_fp)
    for label in CLASSES:
        for _ in range(int(spec.n_objects.get(label, 0))):
            slots.append((label, bool(rng.random() < spec.fp_rate)))
    if len(slots) > total:
        raise PlacementFailure(f"{len(slots)} objects cannot fit {total} anchor blocks")

    anchors = rng.permutation(total)[: len(slots)]

    # phase 1: place all boxes (TPs first so FP overlap checks see every gt)
    gts: List[GroundTruth] = []
    placed = []  # (label, is_fp, anchor, pred_box, gt_index or None)
    for (label, is_fp), anchor in zip(slots, anchors):
        if is_fp:
            continue
        thresh = DEFAULT_IOU_THRESH[label]
        for attempt in range(_MAX_ATTEMPTS):
            gt_box = _sample_box(rng, spec, int(anchor), label)
            pred_box = _jitter_box(rng, gt_box)
            if iou_3d(pred_box, gt_box) >= thresh:
                break
        else:
            raise PlacementFailure(f"no TP jitter met IoU >= {thresh} in {_MAX_ATTEMPTS} tries")
        placed.append((label, False, int(anchor), pred_box, len(gts)))
        gts.append(GroundTruth(box=gt_box, label=label))
    for (label, is_fp), anchor in zip(slots, anchors):
        if not is_fp:
            continue
        thresh = DEFAULT_IOU_THRESH[label]
        for attempt in range(_MAX_ATTEMPTS):
            box = _sample_box(rng, spec, int(anchor), label)
            if all(iou_3d(box, g.box) < thresh for g in gts):
                break
        else:
            raise PlacementFailure(f"no FP placement cleared every gt in {_MAX_ATTEMPTS} tries")
        placed.append((label, True, int(anchor), box, None))

    # phase 2: plant signal; scatter must dodge every enlarged box footprint
    img = np.zeros((grid.height, grid.width, 4), dtype=np.float64)
    forbidden = np.zeros((grid.height, grid.width), dtype=bool)
    for _, _, _, box, _ in placed:
        forbidden |= membership_mask(project_to_bev(enlarge(box, 0.2)), grid)
    for g in gts:
        forbidden |= membership_mask(project_to_bev(enlarge(g.box, 0.2)), grid)

    channel = {c: i for i, c in enumerate(CLASSES)}
    for label, is_fp, anchor, box, _ in placed:
        block = _block_pixel_mask(grid, anchor)
        in_box = membership_mask(project_to_bev(box), grid) & block
        in_pool = np.argwhere(in_box)
        if len(in_pool) == 0:
            raise PlacementFailure("box footprint left no pixels inside its anchor block")
        frac = spec.concentration_profile.fp_inside if is_fp else spec.concentration_profile.tp_inside
        n_total = len(in_pool)
        n_in = int(round(frac * n_total))
        n_out = n_total - n_in
        out_pool = np.argwhere(block & ~forbidden)
        if len(out_pool) < n_out:
            raise PlacementFailure(
                f"anchor block too crowded: {n_out} scatter pixels needed, "
                f"{len(out_pool)} free"
            )
        chosen_in = in_pool[rng.choice(len(in_pool), size=n_in, replace=False)]
        chosen_out = out_pool[rng.choice(len(out_pool), size=n_out, replace=False)]
        amp = SIGNAL_AMP[label] * (FP_AMPLITUDE if is_fp else 1.0)
        for (yy, xx) in np.concatenate([chosen_in, chosen_out] if n_out else [chosen_in]):
            s = amp * SIGNAL * float(rng.uniform(0.9, 1.1))
            img[yy, xx, channel[label]] += s
            img[yy, xx, 3] += INHIB_FRACTION * s

    # phase 3: score the frame with the model and assemble detections
    pseudo = img.astype(np.float32)
    outputs = forward(model, Tensor(pseudo)).data
    sigma_pts = _points_sigma(spec)
    preds: List[Detection] = []
    for label, is_fp, anchor, box, _ in placed:
        scores = {
            c: float(outputs[output_index(anchor, c)]) for c in CLASSES
        }
        n_points = max(
            1,
            int(round(spec.points_base + (0 if is_fp else spec.points_delta)
                      + rng.normal(0.0, sigma_pts))),
        )
        preds.append(
            Detection(box=box, label=label, scores=scores,
                      n_points=n_points, anchor_index=anchor)
        )
    return SyntheticFrame(pseudo_image=pseudo, gts=gts, preds=preds, model=model)


def frame_attributions(
    frame: SyntheticFrame, method: str = "backprop", steps: int = 32
) -> List[AttributionMap]:
    """One attribution map per prediction, targeting its own class output."""
    maps = []
    for i, pred in enumerate(frame.preds):
        idx = output_index(pred.anchor_index, pred.label)
        target = AttributionTarget(box_index=i, class_index=CLASSES.index(pred.label))
        if method == "backprop":
            m = backprop_saliency(frame.model, frame.pseudo_image, idx, target=target)
        elif method == "ig":
            m = integrated_gradients(frame.model, frame.pseudo_image, idx,
                                     steps=steps, target=target)
        elif method == "ig-nomult":
            m = modified_integrated_gradients(frame.model, frame.pseudo_image, idx,
                                              steps=steps, target=target)
        else:
            raise XckitError(f"unknown attribution method {method!r}")
        maps.append(m)
    return maps


def generate_benchmark(spec: SceneSpec, n_frames: int):
    """Frames from per-frame child seeds plus an accounting manifest."""
    if n_frames < 1:
        raise XckitError("n_frames must be >= 1")
    frame_seeds = np.random.SeedSequence(spec.rng_seed).generate_state(n_frames, np.uint64)
    model = build_toy_model(spec.grid)
    frames = []
    tp_counts = {c: 0 for c in CLASSES}
    fp_counts = {c: 0 for c in CLASSES}
    for seed in frame_seeds:
        frame = generate_frame(replace(spec, rng_seed=int(seed)), model=model)
        frames.append(frame)
        for label, is_fp in _slot_kinds(frame):
            (fp_counts if is_fp else tp_counts)[label] += 1
    n_tp = sum(tp_counts.values())
    n_fp = sum(fp_counts.values())
    manifest = {
        "n_frames": n_frames,
        "tp_counts": tp_counts,
        "fp_counts": fp_counts,
        "fp_fraction": n_fp / max(n_tp + n_fp, 1),
        "a_thresh": BENCHMARK_A_THRESH,
        "points_correlation": spec.points_correlation,
    }
    return frames, manifest


def _slot_kinds(frame: SyntheticFrame):
    """(label, is_fp) per prediction, recovered from the frame's own gts."""
    from .geometry import iou_3d

    kinds = []
    for pred in frame.preds:
        thresh = DEFAULT_IOU_THRESH[pred.label]
        is_tp = any(
            g.label == pred.label and iou_3d(pred.box, g.box) >= thresh for g in frame.gts
        )
        kinds.append((pred.label, not is_tp))
    return kinds


def noisy_and_feature_rows(n_rows: int, rng_seed: int = 0) -> List[FeatureRow]:
    """A dataset where TP-ness is a noisy AND of two latent factors.

    The top class score tracks one factor, the concentration scores track the
    other, so no single column can ever separate the classes well; a model
    that combines them can. Used to exercise the meta-classifier's synergy.
    """
    rng = np.random.default_rng(rng_seed)
    rows = []
    for _ in range(n_rows):
        u = float(rng.uniform())
        w = float(rng.uniform())
        label = (u > 0.45) and (w > 0.45)
        if rng.random() < 0.08:
            label = not label

        def noisy(x, scale=0.08):
            return float(np.clip(x + rng.normal(0, scale), 0.0, 1.0))

        rows.append(
            FeatureRow(
                top_score=noisy(u),
                xc_s_plus=noisy(w, 0.10),
                xc_c_plus=noisy(w),
                xc_s_minus=noisy(1.0 - w, 0.10),
                xc_c_minus=noisy(1.0 - w),
                xc_s_plus_valid=True, xc_c_plus_valid=True,
                xc_s_minus_valid=True, xc_c_minus_valid=True,
                n_points=int(rng.integers(10, 400)),
                distance=float(rng.uniform(2.0, 60.0)),
                pred_label=str(rng.choice(CLASSES)),
                is_tp=bool(label),
            )
        )
    return rows
