"""Detection evaluation: greedy NMS, rotated-box matching, average precision."""

from __future__ import annotations

import numpy as np

from .scenegen import GtBox, rotated_iou


def nms(dets, iou_thresh=0.15):
    """Greedy NMS over (score, GtBox) pairs sorted by score descending."""
    dets = sorted(dets, key=lambda t: -t[0])
    keep = []
    for score, box in dets:
        if all(rotated_iou(box, kb) <= iou_thresh for _, kb in keep):
            keep.append((score, box))
    return keep


def match_detections(preds, gts, iou_thresh):
    """Greedy score-order matching within one scene.

    preds: (score, GtBox) list; gts: GtBox list. Returns a TP flag per
    prediction (score order) — each GT matches at most one prediction.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    used = [False] * len(gts)
    tp = [False] * len(preds)
    for i in order:
        _, box = preds[i]
        best, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if used[j]:
                continue
            iou = rotated_iou(box, gt)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[best] = True
            tp[i] = True
    return tp


def average_precision(scene_preds, scene_gts, iou_thresh):
    """All-point-interpolation AP pooled over scenes.

    scene_preds: per-scene (score, GtBox) lists; scene_gts: per-scene GtBox
    lists. Matching is greedy in score order within each scene.
    """
    n_gt = sum(len(g) for g in scene_gts)
    if n_gt == 0:
        raise ValueError("no ground truth boxes")
    flat = []
    for s, (preds, gts) in enumerate(zip(scene_preds, scene_gts)):
        tps = match_detections(preds, gts, iou_thresh)
        for (score, _), tp in zip(preds, tps):
            flat.append((score, tp, s))
    if not flat:
        return 0.0, []
    flat.sort(key=lambda t: (-t[0], t[2]))
    tp_cum = 0
    points = []
    for rank, (score, tp, _) in enumerate(flat, start=1):
        tp_cum += int(tp)
        points.append((tp_cum / n_gt, tp_cum / rank))  # (recall, precision)
    # precision envelope, integrate over recall steps
    ap = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        if r > prev_r:
            p_max = max(p for rr, p in points[i:])
            ap += (r - prev_r) * p_max
            prev_r = r
    return ap, points
