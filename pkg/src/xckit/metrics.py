"""Threshold-independent binary metrics over per-box scores.

AUROC integrates the tie-grouped ROC curve with trapezoids, which reproduces
the Mann-Whitney pair statistic. AUPR uses the step (average precision) rule
sum_k (R_k - R_{k-1}) P_k, again with tied scores collapsed into one
threshold step; trapezoids on PR curves systematically overestimate and are
deliberately avoided. AUPR_op measures how well LOW scores pick out the
negative class: scores are negated and labels flipped, then scored the same
way. The KS statistic is the sup-distance between the two empirical CDFs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .errors import DegenerateClassBalance, EmptySample, NoPositives, XckitError

TP_AS_POSITIVE = "tp-as-positive"
FP_AS_POSITIVE = "fp-as-positive"


@dataclass(frozen=True)
class ScoredSample:
    score: float
    is_positive: bool


@dataclass
class MetricReport:
    """One evaluated feature (optionally within one row group)."""

    auroc: float
    aupr: float
    aupr_op: float
    n_pos: int
    n_neg: int
    feature: str = ""
    group: str = ""


def _to_arrays(samples: Iterable[ScoredSample]):
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([bool(s.is_positive) for s in samples], dtype=bool)
    if scores.size and not np.all(np.isfinite(scores)):
        raise XckitError("scores must be finite")
    return scores, labels


def _tie_grouped_counts(scores, labels):
    """Per unique score (descending): positives and totals in that group."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # boundaries where the score changes
    boundaries = np.flatnonzero(np.diff(s)) + 1
    groups = np.split(np.arange(s.size), boundaries)
    pos = np.array([int(y[g].sum()) for g in groups])
    tot = np.array([len(g) for g in groups])
    return pos, tot


def auroc(samples: Sequence[ScoredSample]) -> float:
    """Area under the ROC curve; ties contribute half-concordance."""
    scores, labels = _to_arrays(samples)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassBalance(f"need both classes, got {n_pos} pos / {n_neg} neg")
    pos, tot = _tie_grouped_counts(scores, labels)
    neg = tot - pos
    cum_tp = np.concatenate([[0], np.cumsum(pos)])
    cum_fp = np.concatenate([[0], np.cumsum(neg)])
    tpr = cum_tp / n_pos
    fpr = cum_fp / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def aupr(samples: Sequence[ScoredSample], positive_class: str = TP_AS_POSITIVE) -> float:
    """Average-precision area under the PR curve.

    ``fp-as-positive`` evaluates the operator's view: scores are negated so
    that confidently-low scores rank first, and the negative class becomes
    the detection target.
    """
    scores, labels = _to_arrays(samples)
    if positive_class == FP_AS_POSITIVE:
        scores, labels = -scores, ~labels
    elif positive_class != TP_AS_POSITIVE:
        raise XckitError(f"unknown positive_class {positive_class!r}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives(f"no {positive_class} samples to rank")
    pos, tot = _tie_grouped_counts(scores, labels)
    cum_tp = np.cumsum(pos)
    cum_all = np.cumsum(tot)
    recall = cum_tp / n_pos
    precision = cum_tp / cum_all
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def ks_statistic(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: sup |ECDF_a - ECDF_b|."""
    a = np.sort(np.asarray(list(sample_a), dtype=np.float64))
    b = np.sort(np.asarray(list(sample_b), dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be non-empty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise XckitError("sample values must be finite")
    pooled = np.unique(np.concatenate([a, b]))
    ecdf_a = np.searchsorted(a, pooled, side="right") / a.size
    ecdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(ecdf_a - ecdf_b)))


def evaluate_feature(
    rows,
    feature: str,
    group: Optional[Callable] = None,
    group_name: str = "",
    rng_seed: Optional[int] = None,
) -> MetricReport:
    """Score one feature column of a per-box dataset as a TP/FP classifier.

    ``rows`` is any sequence of objects with an ``is_tp`` attribute and the
    named feature attribute. ``feature="random"`` substitutes a seeded
    uniform score, the no-information baseline. ``group`` optionally filters
    rows (a predicate), e.g. one of the class/point-count subsets.
    """
    subset = [r for r in rows if group is None or group(r)]
    if not subset:
        raise EmptySample(f"group {group_name or '<all>'} selected no rows")
    if feature == "random":
        rng = np.random.default_rng(rng_seed)
        values = rng.uniform(0.0, 1.0, size=len(subset))
    else:
        values = np.array([float(getattr(r, feature)) for r in subset])
    samples = [ScoredSample(float(v), bool(r.is_tp)) for v, r in zip(values, subset)]
    n_pos = sum(1 for r in subset if r.is_tp)
    return MetricReport(
        auroc=auroc(samples),
        aupr=aupr(samples, TP_AS_POSITIVE),
        aupr_op=aupr(samples, FP_AS_POSITIVE),
        n_pos=n_pos,
        n_neg=len(subset) - n_pos,
        feature=feature,
        group=group_name,
    )


def render_table(reports: List[MetricReport]) -> str:
    """Fixed-width text table, one row per evaluated feature/group."""
    headers = ("feature", "group", "n_pos", "n_neg", "AUROC", "AUPR", "AUPR_op")
    rows = [
        (
            r.feature or "-",
            r.group or "all",
            str(r.n_pos),
            str(r.n_neg),
            f"{r.auroc:.3f}",
            f"{r.aupr:.3f}",
            f"{r.aupr_op:.3f}",
        )
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(tuple("-" * w for w in widths))]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)
