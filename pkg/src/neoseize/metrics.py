"""Epoch-based ROC analysis: AUC, AUC90, aggregation, relative improvement.

Scores are probabilities (or any monotone score); labels are binary per
epoch.  A score >= threshold predicts seizure.  AUC is reported in
percent and computed two independent ways — trapezoidal integration of
the ROC polyline and the Mann-Whitney pair statistic (ties get half
credit) — which agree to floating-point accuracy.

AUC90 is the mean sensitivity over the high-specificity band
[0.9, 1.0]: the partial area under sensitivity d(specificity) divided by
the 0.1 span, with linear interpolation at the 0.9 boundary.  A perfect
classifier scores 100; chance scores 5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class MetricsError(ValueError):
    """Raised when a requested metric is undefined for the given labels."""


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray   # descending, leading +inf sentinel
    sensitivity: np.ndarray  # TP/P per threshold
    specificity: np.ndarray  # TN/N per threshold
    counts: tuple            # (P, N)


def roc_curve(scores, labels) -> RocCurve:
    """ROC over all distinct thresholds, from (sens 0, spec 1) to (1, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    p = int(labels.sum())
    n = int(labels.size - p)
    if p == 0 or n == 0:
        raise MetricsError(f"labels contain a single class (P={p}, N={n}); AUC undefined")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # index of the last occurrence of each distinct score
    last = np.nonzero(np.diff(s_sorted, append=-np.inf))[0]
    tp = np.cumsum(l_sorted)[last]
    fp = np.cumsum(~l_sorted)[last]
    thresholds = np.concatenate([[np.inf], s_sorted[last]])
    sens = np.concatenate([[0.0], tp / p])
    spec = np.concatenate([[1.0], 1.0 - fp / n])
    return RocCurve(thresholds, sens, spec, (p, n))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under sensitivity vs (1 - specificity), percent."""
    return 100.0 * float(_trapezoid(curve.sensitivity, 1.0 - curve.specificity))


def pair_auc(scores, labels) -> float:
    """Mann-Whitney AUC in percent: P(score_pos > score_neg), ties half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    p = int(labels.sum())
    n = int(labels.size - p)
    if p == 0 or n == 0:
        raise MetricsError(f"labels contain a single class (P={p}, N={n}); AUC undefined")
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - p * (p + 1) / 2.0
    return 100.0 * float(u) / (p * n)


def _average_ranks(x):
    order = np.argsort(x, kind="stable")
    sorted_x = x[order]
    boundaries = np.nonzero(np.diff(sorted_x, prepend=-np.inf))[0]
    group = np.cumsum(np.isin(np.arange(x.size), boundaries)) - 1
    starts = boundaries + 1  # 1-based rank where each tie group begins
    ends = np.append(boundaries[1:], x.size)  # 1-based rank where it ends
    avg = (starts + ends) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = avg[group]
    return ranks


def auc90(curve: RocCurve) -> float:
    """Mean sensitivity over specificity in [0.9, 1.0], percent."""
    spec = curve.specificity
    sens = curve.sensitivity
    area = 0.0
    bound = 0.9
    for i in range(len(spec) - 1):
        s0, s1 = spec[i], spec[i + 1]  # non-increasing
        y0, y1 = sens[i], sens[i + 1]
        if s1 >= bound:
            area += (s0 - s1) * (y0 + y1) / 2.0
        elif s0 > bound:
            # segment straddles the boundary: interpolate sens at spec=0.9
            yb = y0 + (y1 - y0) * (s0 - bound) / (s0 - s1)
            area += (s0 - bound) * (y0 + yb) / 2.0
            break
        else:
            break
    return 100.0 * area / 0.1


def relative_improvement(new_auc: float, base_auc: float) -> float:
    """Percent of the remaining headroom closed: 100*(new-base)/(100-base)."""
    if base_auc >= 100.0:
        raise ValueError(f"baseline AUC must be below 100, got {base_auc}")
    return 100.0 * (new_auc - base_auc) / (100.0 - base_auc)


# ---------------------------------------------------------------------------
# aggregation across subjects

@dataclass(frozen=True)
class AggregateSummary:
    mode: str                 # "mean-per-subject" or "concatenated"
    auc: float                # mean of per-subject AUCs, or pooled AUC
    std: float | None         # across subjects (population), None when pooled
    per_subject: tuple        # AUC per subject, None where undefined
    excluded: tuple           # indices of single-class subjects


def aggregate(scores_per_subject, labels_per_subject, mode: str = "mean-per-subject") -> AggregateSummary:
    """Summarize subject-wise scores.

    mean-per-subject: AUC per subject, excluding subjects whose labels
    are single-class (the exclusions are reported), then mean and
    population std across the rest.  concatenated: pool every epoch into
    one AUC, which keeps seizure-free subjects in the evaluation.
    """
    if len(scores_per_subject) != len(labels_per_subject) or not scores_per_subject:
        raise ValueError("need matching, non-empty per-subject score/label lists")
    if mode == "concatenated":
        pooled_s = np.concatenate([np.asarray(s, dtype=np.float64) for s in scores_per_subject])
        pooled_l = np.concatenate([np.asarray(l).astype(bool) for l in labels_per_subject])
        value = auc(roc_curve(pooled_s, pooled_l))
        return AggregateSummary(mode, value, None, (), ())
    if mode != "mean-per-subject":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    per, excluded = [], []
    for i, (s, l) in enumerate(zip(scores_per_subject, labels_per_subject)):
        try:
            per.append(auc(roc_curve(s, l)))
        except MetricsError:
            per.append(None)
            excluded.append(i)
    valid = [v for v in per if v is not None]
    if not valid:
        raise MetricsError("no subject has both classes; try concatenated pooling")
    return AggregateSummary(mode, float(np.mean(valid)), float(np.std(valid)),
                            tuple(per), tuple(excluded))


# ---------------------------------------------------------------------------
# trace/label alignment and export

def align_trace_to_mask(trace, mask):
    """Pair trace entries with per-epoch weak labels by timestamp.

    Entry k is stamped at its window's end, so it is compared with the
    epoch that ends at the same time.  Returns (scores, labels) truncated
    to the overlap.
    """
    if abs(mask.epoch_period - trace.period) > 1e-9:
        raise ValueError(f"trace period {trace.period} != mask epoch period {mask.epoch_period}")
    first_epoch = int(round(trace.start_time / trace.period)) - 1
    if first_epoch < 0:
        raise ValueError("trace starts before one full epoch has elapsed")
    n = min(trace.values.size, mask.weak.size - first_epoch)
    if n <= 0:
        raise ValueError("trace and mask do not overlap")
    return trace.values[:n], mask.weak[first_epoch:first_epoch + n]


def write_roc_csv(curve: RocCurve, path):
    with open(path, "w", newline="") as fh:
        fh.write("threshold,sensitivity,specificity\n")
        for t, se, sp in zip(curve.thresholds, curve.sensitivity, curve.specificity):
            fh.write(f"{t:.9g},{se:.9f},{sp:.9f}\n")
