"""Image-level AUROC, pixel-level AUPRO and threshold selection."""

from __future__ import annotations

from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

DEFAULT_FPR_LIMIT = 0.3

_EIGHT = np.ones((3, 3), dtype=int)


class MetricError(ValueError):
    pass


def _binary_labels(labels) -> np.ndarray:
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise MetricError("need at least one normal and one anomalous sample")
    return labels


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def connected_components(mask) -> tuple[np.ndarray, int]:
    """8-connected labeling; labels are 1..k in order of first raster-scan pixel."""
    labels, count = ndimage.label(np.asarray(mask).astype(bool), structure=_EIGHT)
    return labels, int(count)


def pro_curve(anomaly_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]):
    """FPR and mean per-region overlap for every distinct threshold, highest first.

    Regions are pooled over all images; a pixel is predicted positive when
    its value is ``>= threshold``.
    """
    if len(anomaly_maps) != len(masks) or len(masks) == 0:
        raise MetricError("need the same non-zero number of maps and masks")
    values, weights, normal = [], [], []
    region_sizes = []
    for amap, mask in zip(anomaly_maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise MetricError(f"map {amap.shape} and mask {mask.shape} differ in shape")
        lab, k = connected_components(mask)
        sizes = np.bincount(lab.ravel(), minlength=k + 1).astype(np.float64)
        region_sizes.append(sizes[1:])
        w = np.where(lab > 0, 1.0 / np.where(lab > 0, sizes[lab], 1.0), 0.0)
        values.append(amap.ravel())
        weights.append(w.ravel())
        normal.append(~mask.ravel())
    n_regions = sum(len(s) for s in region_sizes)
    values = np.concatenate(values)
    normal = np.concatenate(normal)
    n_normal = int(normal.sum())
    if n_regions == 0:
        raise MetricError("ground truth contains no anomalous region")
    if n_normal == 0:
        raise MetricError("ground truth contains no normal pixel")
    weights = np.concatenate(weights).astype(np.longdouble) / n_regions

    order = np.argsort(-values, kind="stable")
    sv = values[order]
    # extended precision keeps a fully covered curve at exactly 1.0
    cum_pro = np.cumsum(weights[order]).astype(np.float64)
    cum_fp = np.cumsum(normal[order])
    last = np.flatnonzero(np.append(sv[1:] != sv[:-1], True))
    return sv[last], cum_fp[last] / n_normal, np.minimum(cum_pro[last], 1.0)


def _area(fpr: np.ndarray, pro: np.ndarray, fpr_limit: float) -> float:
    # max PRO per FPR value; PRO is non-decreasing along the sweep
    keep = np.append(fpr[1:] != fpr[:-1], True)
    fpr, pro = fpr[keep], pro[keep]
    inside = fpr <= fpr_limit
    if not inside.any():
        return 0.0
    fpr, pro = fpr[inside], pro[inside]
    if fpr[0] > 0:
        fpr = np.concatenate([[0.0], fpr])
        pro = np.concatenate([[pro[0]], pro])
    if fpr[-1] < fpr_limit:
        fpr = np.append(fpr, fpr_limit)
        pro = np.append(pro, pro[-1])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (pro[1:] + pro[:-1]) / 2.0) / fpr_limit)


def aupro(anomaly_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray],
          fpr_limit: float = DEFAULT_FPR_LIMIT) -> float:
    """Normalized area under the PRO-vs-FPR curve up to ``fpr_limit``.

    Only operating points reached by an actual threshold with FPR within the
    limit contribute; the curve is held flat from the last such point to the
    limit and from the first one back to FPR 0.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise MetricError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    _, fpr, pro = pro_curve(anomaly_maps, masks)
    return _area(fpr, pro, fpr_limit)


def f1_sweep(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds ``score >= tau``.

    Candidates are the lowest score (everything positive) and the midpoints
    between consecutive distinct scores; ties go to the smaller threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    distinct = np.unique(scores)
    candidates = np.concatenate([distinct[:1], (distinct[1:] + distinct[:-1]) / 2.0])
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.size - np.searchsorted(pos, candidates, side="left")
    fp = neg.size - np.searchsorted(neg, candidates, side="left")
    fn = pos.size - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    best = int(np.argmax(f1))
    return float(candidates[best]), float(f1[best])


def anomaly_size_stats(masks: Sequence[np.ndarray]) -> float:
    """Mean fraction of anomalous pixels over defective-image masks, rounded once."""
    if len(masks) == 0:
        raise MetricError("no masks given")
    total = Fraction(0)
    for m in masks:
        m = np.asarray(m).astype(bool)
        total += Fraction(int(np.count_nonzero(m)), m.size)
    return float(total / len(masks))


REPORT_KEYS = ("category", "setup", "seed", "auroc", "aupro", "fpr_limit", "best_f1", "threshold",
               "peak_accounted_bytes", "mean_latency_ms", "throughput_ips")
TIMING_KEYS = ("mean_latency_ms", "throughput_ips")


def format_report(record: dict) -> str:
    """Render a report as ``key = value`` lines in a fixed key order."""
    unknown = set(record) - set(REPORT_KEYS)
    if unknown:
        raise MetricError(f"unknown report keys {sorted(unknown)}")
    lines = []
    for key in REPORT_KEYS:
        if key in record:
            v = record[key]
            lines.append(f"{key} = {repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        for cast in (int, float):
            try:
                out[key] = cast(value)
                break
            except ValueError:
                continue
        else:
            out[key] = value
    return out
