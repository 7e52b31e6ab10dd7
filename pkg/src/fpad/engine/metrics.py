"""Temporal detection AP and mAP.

AP uses greedy matching in ranking order and all-point interpolation of the
precision-recall curve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..proposals import tiou_matrix

TIOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    start: float
    end: float
    label: int
    proposal_score: float
    similarity_score: float


def rank(detections: list[Detection]) -> list[Detection]:
    """Similarity score first, proposal score second, input order last."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].similarity_score, -detections[i].proposal_score, i))
    return [detections[i] for i in order]


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(tp) + 1)
    recall = tp_cum / n_gt
    # monotone precision envelope, then sum over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float((steps * envelope).sum())


def ap_at_tiou(detections: list[Detection], gts, alpha: float, label: int | None = None) -> float:
    """AP of ``detections`` against ``gts`` = [(start, end, label), ...].

    With ``label`` given only that class is scored.
    """
    if label is not None:
        detections = [d for d in detections if d.label == label]
        gts = [g for g in gts if g[2] == label]
    if not gts:
        return 0.0
    ranked = rank(detections)
    if not ranked:
        return 0.0
    gt_seg = np.array([(g[0], g[1]) for g in gts], dtype=np.float64)
    gt_lab = np.array([g[2] for g in gts])
    det_seg = np.array([(d.start, d.end) for d in ranked], dtype=np.float64)
    iou = tiou_matrix(det_seg, gt_seg)
    iou[np.array([d.label for d in ranked])[:, None] != gt_lab[None, :]] = -1.0
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(ranked))
    for i in range(len(ranked)):
        cand = np.where(matched, -1.0, iou[i])
        j = int(cand.argmax())
        if cand[j] >= alpha:
            matched[j] = True
            tp[i] = 1.0
    return interpolated_ap(tp, len(gts))


def episode_classes(gts) -> list[int]:
    return sorted({int(g[2]) for g in gts if g[2] >= 0})


def map_at_tiou(detections: list[Detection], gts, alpha: float) -> float:
    """Mean AP over the episode labels present in ``gts`` (labels < 0 ignored)."""
    classes = episode_classes(gts)
    if not classes:
        return math.nan
    return float(np.mean([ap_at_tiou(detections, gts, alpha, label=c) for c in classes]))


def average_map(detections: list[Detection], gts, thresholds=TIOU_THRESHOLDS) -> float:
    return float(np.mean([map_at_tiou(detections, gts, a) for a in thresholds]))
