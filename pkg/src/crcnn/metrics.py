"""Pixel F1 (threshold-swept), ROC AUC and per-class box AP."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import iou_matrix

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _f1(tp: int, fp: int, fn: int) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def f1_sweep(score_map, gt_mask) -> tuple[float, float]:
    """Best pixel F1 over thresholds ``t`` with ``score > t`` predicted positive.

    Candidate thresholds are every distinct score plus 0 and 1, so an
    all-zero map predicts nothing. Ties keep the lowest threshold.
    """
    s = np.asarray(score_map, dtype=np.float64).ravel()
    y = np.asarray(gt_mask).ravel() > 0
    if s.shape != y.shape:
        raise MetricError(f"score map shape {np.shape(score_map)} differs from mask {np.shape(gt_mask)}")
    npos = int(y.sum())
    if npos == 0:
        raise MetricError("f1_sweep needs at least one positive ground-truth pixel")
    thresholds = np.union1d(np.unique(s), [0.0, 1.0])
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    pos_sorted = y[order].astype(np.int64)
    # count of positives / all pixels with score > t, via suffix sums
    suffix_pos = np.concatenate([np.cumsum(pos_sorted[::-1])[::-1], [0]])
    first = np.searchsorted(s_sorted, thresholds, side="right")
    n = s.size
    best, best_t = -1.0, 0.0
    for t, k in zip(thresholds, first):
        tp = int(suffix_pos[k])
        fp = (n - k) - tp
        f = _f1(tp, fp, npos - tp)
        if f > best:
            best, best_t = f, float(t)
    return best, best_t


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    _, start, counts = np.unique(xs, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    return ranks


def auc(scores, labels) -> float:
    """ROC area as the Mann-Whitney statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        raise MetricError("auc needs both positive and negative labels")
    r = _average_ranks(s)
    u = r[y].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def average_precision(detections: Sequence[Iterable], ground_truth: Sequence[Iterable],
                      classes: Sequence[int], iou_thresh: float = 0.5) -> dict[int, float]:
    """All-point interpolated AP per class at one IoU threshold.

    ``detections[i]`` holds ``(class_id, score, box)`` triples for image ``i``
    and ``ground_truth[i]`` holds ``(class_id, box)`` pairs. Detections are
    matched greedily in descending score order; each ground truth matches at
    most once. Classes absent from the ground truth are left out.
    """
    if len(detections) != len(ground_truth):
        raise MetricError("detections and ground truth cover different image counts")
    result: dict[int, float] = {}
    for cls in classes:
        gts = {i: np.array([b for c, b in g if c == cls], dtype=np.float64).reshape(-1, 4)
               for i, g in enumerate(ground_truth)}
        npos = sum(len(v) for v in gts.values())
        if npos == 0:
            warnings.warn(f"class {cls} absent from ground truth; AP undefined", stacklevel=2)
            continue
        dets = [(float(s), i, j, np.asarray(b, np.float64))
                for i, d in enumerate(detections) for j, (c, s, b) in enumerate(d) if c == cls]
        dets.sort(key=lambda t: (-t[0], t[1], t[2]))
        used = {i: np.zeros(len(v), bool) for i, v in gts.items()}
        tp = np.zeros(len(dets))
        for k, (_, i, _, box) in enumerate(dets):
            g = gts[i]
            if len(g) == 0:
                continue
            ov = iou_matrix(box, g)[0]
            ov[used[i]] = -1
            j = int(np.argmax(ov))
            if ov[j] >= iou_thresh:
                used[i][j] = True
                tp[k] = 1
        result[cls] = _ap_from_hits(tp, npos)
    return result


def _ap_from_hits(tp: np.ndarray, npos: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / npos
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


CLASS_NAMES = ("splicing", "copy-move", "removal")


@dataclass
class EvalReport:
    f1: float
    auc: float
    ap_per_class: dict
    map: float
    class_accuracy: float | None = None
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "auc": self.auc,
            "ap_per_class": dict(self.ap_per_class),
            "map": self.map,
            "class_accuracy": self.class_accuracy,
            "per_image": self.per_image,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def mean_ap(ap: dict) -> float:
    return float(np.mean(list(ap.values()))) if ap else 0.0


def pixel_scores(score_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray],
                 pooling: str = "macro") -> tuple[float, float, list]:
    """Dataset F1 and AUC; ``macro`` averages per-image values, ``micro``
    pools every pixel first."""
    if pooling == "micro":
        s = np.concatenate([np.ravel(m) for m in score_maps])
        y = np.concatenate([np.ravel(g) for g in gt_masks])
        f, _ = f1_sweep(s, y)
        return f, auc(s, y), []
    if pooling != "macro":
        raise MetricError(f"unknown pooling {pooling!r}")
    per = []
    for s, g in zip(score_maps, gt_masks):
        f, t = f1_sweep(s, g)
        try:
            a = auc(s, g)
        except MetricError:
            a = None
        per.append({"f1": f, "threshold": t, "auc": a})
    f1s = [p["f1"] for p in per]
    aucs = [p["auc"] for p in per if p["auc"] is not None]
    return float(np.mean(f1s)), float(np.mean(aucs)) if aucs else 0.5, per
