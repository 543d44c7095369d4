"""IoU, the Data Science Bowl 2018 mean-precision score, and corpus scoring."""
from __future__ import annotations

import csv

import numpy as np

THRESHOLDS = np.round(np.arange(0.5, 1.0, 0.05), 2)


def iou(a, b):
    """|a & b| / |a | b| for two boolean masks; 0 when both are empty."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(pred, gt):
    """Pairwise IoU, ``(n_pred, n_gt)``, via one label-image contingency table.

    Both mask stacks must be internally disjoint.
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape[1:] != gt.shape[1:]:
        raise ValueError(f"mask shapes differ: {pred.shape[1:]} vs {gt.shape[1:]}")
    if len(pred) == 0 or len(gt) == 0:
        return np.zeros((len(pred), len(gt)))
    p = pred.reshape(len(pred), -1).astype(np.int64)
    g = gt.reshape(len(gt), -1).astype(np.int64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def greedy_match(ious, threshold):
    """One-to-one pairs with IoU > ``threshold``, taken in descending IoU order."""
    pairs = []
    if ious.size == 0:
        return pairs
    order = np.argsort(-ious, axis=None, kind="stable")
    used_p, used_g = set(), set()
    for flat in order:
        i, j = np.unravel_index(flat, ious.shape)
        if ious[i, j] <= threshold:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((int(i), int(j)))
    return pairs


def precision_at(ious, threshold):
    n_pred, n_gt = ious.shape
    tp = len(greedy_match(ious, threshold))
    fp, fn = n_pred - tp, n_gt - tp
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def dsb_map(pred, gt, thresholds=THRESHOLDS):
    """Mean over IoU thresholds 0.50..0.95 of TP / (TP + FP + FN).

    A pair counts as a match only if its IoU is strictly above the threshold.
    An image with neither predictions nor ground truth scores 1.
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.ndim == 2:
        pred = pred[None]
    if gt.ndim == 2:
        gt = gt[None]
    if pred.shape[1:] != gt.shape[1:] and pred.ndim == gt.ndim == 3:
        raise ValueError(f"mask shapes differ: {pred.shape[1:]} vs {gt.shape[1:]}")
    ious = iou_matrix(pred, gt) if len(pred) and len(gt) else np.zeros((len(pred), len(gt)))
    return float(np.mean([precision_at(ious, t) for t in thresholds]))


def score_corpus(predictor, samples, tta=None, report_path=None):
    """Score ``predictor`` (optionally wrapped in test-time augmentation) on labelled samples.

    Returns ``(rows, mean)`` where each row is ``(sample_id, map, num_pred, num_gt)``.
    """
    missing = [s.id for s in samples if s.masks is None]
    if missing:
        raise ValueError(f"samples without ground truth: {', '.join(missing)}")
    from .tta import tta_predict

    rows = []
    for s in samples:
        if tta is None:
            pred = predictor(s.image)
            masks = pred[0] if isinstance(pred, tuple) else pred
        else:
            masks = tta_predict(predictor, s.image, tta)
        rows.append((s.id, dsb_map(masks, s.masks), len(masks), len(s.masks)))
    mean = float(np.mean([r[1] for r in rows])) if rows else 0.0
    if report_path is not None:
        write_scores(report_path, rows)
    return rows, mean


def write_scores(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "map", "num_pred", "num_gt"])
        for sid, score, n_pred, n_gt in rows:
            w.writerow([sid, f"{score:.6f}", n_pred, n_gt])
