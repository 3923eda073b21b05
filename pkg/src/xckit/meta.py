"""Per-box feature datasets and the small TP/FP meta-classifier.

The dataset joins, for every kept prediction, its top class score, the four
concentration scores, and baseline features (point count, distance). The
meta-classifier is a two-layer MLP (d -> 3 -> 1, relu then sigmoid) trained
with Adam on binary cross entropy. Cross-validation follows a fixed recipe:
z-score with training-fold statistics, 4x duplication with uniform feature
noise on the training folds only, 5 folds, 5 repeats, 25 metric triples
averaged.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics as _metrics
from .attribution import AttributionMap
from .autodiff import ModelGraph, build_model, forward_batch, param_gradients
from .errors import (
    ConstantFeature,
    InsufficientRows,
    MissingAttribution,
    SingleClassTrainingSet,
    XckitError,
)
from .geometry import GridMeta
from .matching import IGNORE, Detection, GroundTruth, MatchConfig, categorize
from .metrics import MetricReport, ScoredSample, aupr, auroc
from .xc import XcConfig, xc_scores

# the five meta-features; baseline columns n_points / distance stay separate
DEFAULT_FEATURES = ("top_score", "xc_s_plus", "xc_c_plus", "xc_s_minus", "xc_c_minus")

POINT_SPLIT = 100  # rows with n_points >= POINT_SPLIT form the "large" bucket


@dataclass
class FeatureRow:
    """One kept prediction's features plus its TP flag.

    Undefined concentration ratios are stored as 0.0 with the matching
    validity flag cleared; the flags are not model inputs by default.
    """

    top_score: float
    xc_s_plus: float
    xc_c_plus: float
    xc_s_minus: float
    xc_c_minus: float
    xc_s_plus_valid: bool
    xc_c_plus_valid: bool
    xc_s_minus_valid: bool
    xc_c_minus_valid: bool
    n_points: int
    distance: float
    pred_label: str
    is_tp: bool


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    sd: np.ndarray


@dataclass(frozen=True)
class MetaTrainConfig:
    epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 0.001
    duplication_factor: int = 4
    noise_half_width: float = 0.05
    folds: int = 5
    repeats: int = 5
    hidden_width: int = 3

    def __post_init__(self):
        for name in ("epochs", "batch_size", "duplication_factor", "folds", "repeats", "hidden_width"):
            if getattr(self, name) < 1:
                raise XckitError(f"{name} must be >= 1")
        if self.learning_rate <= 0 or self.noise_half_width < 0:
            raise XckitError("learning_rate must be > 0 and noise_half_width >= 0")


def _encode_ratio(value: Optional[float]) -> Tuple[float, bool]:
    return (0.0, False) if value is None else (float(value), True)


def build_feature_dataset(
    frames: Iterable[tuple],
    grid: GridMeta,
    xc_cfg: XcConfig = XcConfig(),
    match_cfg: MatchConfig = None,
) -> List[FeatureRow]:
    """Assemble one FeatureRow per kept (non-Ignored) prediction.

    Each frame is a triple (preds, maps, gts) where ``maps`` aligns with
    ``preds`` and holds each prediction's attribution map for its top class.
    A kept prediction without a map is an error; ignored ones may omit it.
    """
    if match_cfg is None:
        match_cfg = MatchConfig()
    rows: List[FeatureRow] = []
    for frame_no, (preds, maps, gts) in enumerate(frames):
        if len(maps) != len(preds):
            raise MissingAttribution(
                f"frame {frame_no}: {len(preds)} predictions but {len(maps)} maps"
            )
        outcome = categorize(preds, gts, match_cfg)
        for i, (pred, amap) in enumerate(zip(preds, maps)):
            if outcome.tags[i] == IGNORE:
                continue
            if amap is None:
                raise MissingAttribution(f"frame {frame_no}: prediction {i} has no map")
            sc = xc_scores(amap, pred.box, grid, xc_cfg)
            xsp, vsp = _encode_ratio(sc.xc_s_plus)
            xcp, vcp = _encode_ratio(sc.xc_c_plus)
            xsm, vsm = _encode_ratio(sc.xc_s_minus)
            xcm, vcm = _encode_ratio(sc.xc_c_minus)
            dist = pred.distance
            if dist is None:
                dist = math.hypot(pred.box.cx, pred.box.cy)
            rows.append(
                FeatureRow(
                    top_score=pred.top_score,
                    xc_s_plus=xsp, xc_c_plus=xcp, xc_s_minus=xsm, xc_c_minus=xcm,
                    xc_s_plus_valid=vsp, xc_c_plus_valid=vcp,
                    xc_s_minus_valid=vsm, xc_c_minus_valid=vcm,
                    n_points=int(pred.n_points),
                    distance=float(dist),
                    pred_label=pred.label,
                    is_tp=outcome.tags[i] == "TP",
                )
            )
    return rows


def split_groups(
    rows: Sequence[FeatureRow],
    labels: Sequence[str] = ("car", "pedestrian", "cyclist"),
    point_split: int = POINT_SPLIT,
) -> Dict[Tuple[str, str], List[FeatureRow]]:
    """Partition rows into (label) x (point-count bucket) subsets.

    The boundary count goes to the ">=" bucket. Labels outside ``labels``
    get their own keys so the result is always a partition.
    """
    all_labels = list(labels) + sorted({r.pred_label for r in rows} - set(labels))
    out: Dict[Tuple[str, str], List[FeatureRow]] = {
        (lab, bucket): [] for lab in all_labels for bucket in (f"<{point_split}", f">={point_split}")
    }
    for r in rows:
        bucket = f"<{point_split}" if r.n_points < point_split else f">={point_split}"
        out[(r.pred_label, bucket)].append(r)
    return out


def feature_matrix(rows: Sequence[FeatureRow], feature_subset: Sequence[str]):
    """Extract (X, y) arrays; columns follow sorted(feature_subset)."""
    names = sorted(feature_subset)
    X = np.array([[float(getattr(r, f)) for f in names] for r in rows], dtype=np.float64)
    y = np.array([float(r.is_tp) for r in rows])
    return X, y, tuple(names)


def normalize(X: np.ndarray, stats: Optional[NormalizationStats] = None):
    """z = (x - mu) / s per column, population standard deviation.

    With ``stats`` given (a validation fold), they are applied unchanged;
    otherwise they are computed from X, rejecting constant columns.
    """
    X = np.asarray(X, dtype=np.float64)
    if stats is None:
        if X.shape[0] < 2:
            raise InsufficientRows("need at least 2 rows to fit normalization stats")
        mean = X.mean(axis=0)
        sd = X.std(axis=0)  # population (ddof = 0)
        if np.any(sd == 0):
            cols = np.flatnonzero(sd == 0).tolist()
            raise ConstantFeature(f"constant feature column(s) {cols}")
        stats = NormalizationStats(mean=mean, sd=sd)
    return (X - stats.mean) / stats.sd, stats


def augment(X: np.ndarray, y: np.ndarray, cfg: MetaTrainConfig, rng) -> tuple:
    """Duplicate training rows to ``duplication_factor`` x size, then jitter.

    Every copy of every feature receives independent U(-w, +w) noise; labels
    are copied verbatim. Deterministic for a given generator state.
    """
    X = np.asarray(X, dtype=np.float64)
    reps = cfg.duplication_factor
    Xd = np.tile(X, (reps, 1))
    yd = np.tile(np.asarray(y), reps)
    if cfg.noise_half_width > 0:
        Xd = Xd + rng.uniform(-cfg.noise_half_width, cfg.noise_half_width, size=Xd.shape)
    return Xd, yd


@dataclass
class MetaClassifier:
    """Trained MLP plus the preprocessing needed to score new rows."""

    model: ModelGraph
    feature_names: Tuple[str, ...]
    stats: Optional[NormalizationStats] = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Sigmoid scores in [0, 1] for an (n, d) feature matrix."""
        X = np.asarray(X, dtype=np.float64)
        if self.stats is not None:
            X, _ = normalize(X, self.stats)
        logits = forward_batch(self.model, X.astype(np.float32)).reshape(-1)
        return 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))


def _adam_init(model):
    return {
        name: (np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64))
        for name, p in model.parameters().items()
    }


def _adam_step(model, grads, state, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    params = model.parameters()
    for name, g in grads.items():
        m, v = state[name]
        g64 = g.astype(np.float64)
        m[...] = b1 * m + (1 - b1) * g64
        v[...] = b2 * v + (1 - b2) * g64 * g64
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = params[name]
        p[...] = (p.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def train_mlp(
    X: np.ndarray,
    y: np.ndarray,
    cfg: MetaTrainConfig = MetaTrainConfig(),
    rng_seed=0,
    feature_names: Tuple[str, ...] = (),
) -> MetaClassifier:
    """Train the d -> hidden -> 1 logistic MLP on a prepared training matrix.

    ``X`` must already be normalized/augmented as desired; this function
    only shuffles, batches, and optimizes. Deterministic for a given seed.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise XckitError(f"bad training shapes {X.shape} vs {y.shape}")
    classes = np.unique(y)
    if classes.size < 2:
        raise SingleClassTrainingSet(f"training labels are all {classes[0] if classes.size else '?'}")

    ss = np.random.SeedSequence(rng_seed)
    init_seed, shuffle_seed = ss.generate_state(2)
    d = X.shape[1]
    model = build_model(
        {
            "input_shape": [d],
            "seed": int(init_seed),
            "layers": [
                {"kind": "dense", "in_features": d, "out_features": cfg.hidden_width},
                {"kind": "relu"},
                {"kind": "dense", "in_features": cfg.hidden_width, "out_features": 1},
            ],
        }
    )
    rng = np.random.default_rng(shuffle_seed)
    state = _adam_init(model)
    X32 = X.astype(np.float32)
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = param_gradients(model, (X32[idx], y[idx]))
            t += 1
            _adam_step(model, grads, state, t, cfg.learning_rate)
    return MetaClassifier(model=model, feature_names=tuple(feature_names))


def _subset_seed_key(feature_subset: Sequence[str]) -> List[int]:
    return [zlib.crc32(name.encode("utf-8")) for name in sorted(feature_subset)]


def cross_validate(
    rows: Sequence[FeatureRow],
    feature_subset: Sequence[str] = DEFAULT_FEATURES,
    cfg: MetaTrainConfig = MetaTrainConfig(),
    rng_seed=0,
) -> MetricReport:
    """Repeated k-fold protocol; returns the averaged metric triple.

    Folds are stratified by class, so whenever each class has at least
    ``folds`` rows every validation fold contains both classes and every
    metric stays defined. Normalization stats come from the training folds;
    validation rows are normalized with those stats and never duplicated or
    jittered. The seed stream is keyed by the sorted feature names, so a
    reordered subset gives identical results.
    """
    n = len(rows)
    if n < cfg.folds:
        raise InsufficientRows(f"{n} rows cannot fill {cfg.folds} folds")
    X_all, y_all, names = feature_matrix(rows, feature_subset)
    for cls in (0.0, 1.0):
        if int((y_all == cls).sum()) < cfg.folds:
            raise InsufficientRows(
                f"class {int(cls)} has fewer rows than folds ({cfg.folds})"
            )

    base = np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFF, *_subset_seed_key(feature_subset)])
    repeat_seqs = base.spawn(cfg.repeats)
    aurocs, auprs, auprs_op = [], [], []
    for r in range(cfg.repeats):
        fold_seqs = repeat_seqs[r].spawn(cfg.folds + 1)
        rng_order = np.random.default_rng(fold_seqs[0])
        val_parts = [[] for _ in range(cfg.folds)]
        for cls in (1.0, 0.0):
            idx = rng_order.permutation(np.flatnonzero(y_all == cls))
            b = np.linspace(0, idx.size, cfg.folds + 1, dtype=int)
            for f in range(cfg.folds):
                val_parts[f].append(idx[b[f] : b[f + 1]])
        for f in range(cfg.folds):
            val_idx = np.concatenate(val_parts[f])
            mask = np.ones(n, dtype=bool)
            mask[val_idx] = False
            train_idx = np.flatnonzero(mask)
            fold_rng = np.random.default_rng(fold_seqs[f + 1])

            X_train, stats = normalize(X_all[train_idx])
            X_val, _ = normalize(X_all[val_idx], stats)
            X_aug, y_aug = augment(X_train, y_all[train_idx], cfg, fold_rng)
            clf = train_mlp(
                X_aug, y_aug, cfg,
                rng_seed=int(fold_rng.integers(2**32)),
                feature_names=names,
            )
            scores = clf.predict(X_val)
            samples = [
                ScoredSample(float(s), bool(t)) for s, t in zip(scores, y_all[val_idx])
            ]
            aurocs.append(auroc(samples))
            auprs.append(aupr(samples, _metrics.TP_AS_POSITIVE))
            auprs_op.append(aupr(samples, _metrics.FP_AS_POSITIVE))

    n_pos = int(y_all.sum())
    return MetricReport(
        auroc=float(np.mean(aurocs)),
        aupr=float(np.mean(auprs)),
        aupr_op=float(np.mean(auprs_op)),
        n_pos=n_pos,
        n_neg=n - n_pos,
        feature=",".join(names),
        group="",
    )
