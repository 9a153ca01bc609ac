"""Segmentation metrics: mean best overlap and Hungarian-matched mIoU.

Label grids are non-negative integer arrays. In ground truth, labels listed
in ``ignore`` (background ``0`` by default) mark pixels that are dropped from
every overlap computation. In predictions, ``0`` means "unassigned" and is
never treated as a mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, StateError, UsageError

NO_GT = "no-gt"
DEFAULT_IGNORE = frozenset({0})


@dataclass
class Assignment:
    pairs: list  # (row, col)
    total_cost: float


def slots_to_masks(weights, active=None, spatial=None) -> np.ndarray:
    """Hard label grid from per-location slot weights ``(..., K)``.

    Each location takes the active slot with the largest weight (lowest
    index on ties); the slots that win anywhere are renumbered 1..m in
    index order.
    """
    w = np.asarray(weights, dtype=np.float64)
    K = w.shape[-1]
    active = np.ones(K, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if not active.any():
        raise StateError("no active slots to extract masks from")
    masked = np.where(active, w, -np.inf)
    winner = np.argmax(masked, axis=-1)
    used = np.unique(winner)
    lut = np.zeros(K, dtype=np.int64)
    lut[used] = np.arange(1, used.size + 1)
    labels = lut[winner]
    if spatial is not None:
        labels = labels.reshape(spatial)
    return labels


def iou_binary(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_table(pred, gt, ignore=DEFAULT_IGNORE):
    """IoU between every predicted and every ground-truth mask.

    Returns ``(table, pred_ids, gt_ids)`` with ``table[p, g]``.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = ~np.isin(gt, list(ignore))
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    gt_ids = np.unique(g)
    pred_ids = np.unique(p[p > 0])
    if gt_ids.size == 0 or pred_ids.size == 0:
        return np.zeros((pred_ids.size, gt_ids.size)), pred_ids, gt_ids
    pi = np.searchsorted(pred_ids, p)
    gi = np.searchsorted(gt_ids, g)
    valid = p > 0
    inter = np.zeros((pred_ids.size, gt_ids.size), dtype=np.int64)
    np.add.at(inter, (pi[valid], gi[valid]), 1)
    area_p = np.bincount(pi[valid], minlength=pred_ids.size)
    area_g = np.bincount(gi, minlength=gt_ids.size)
    union = area_p[:, None] + area_g[None, :] - inter
    return inter / np.maximum(union, 1), pred_ids, gt_ids


def mbo(pred, gt, ignore=DEFAULT_IGNORE):
    """Mean over ground-truth masks of the best IoU with any predicted mask."""
    table, _, gt_ids = iou_table(pred, gt, ignore)
    if gt_ids.size == 0:
        return NO_GT
    if table.shape[0] == 0:
        return 0.0
    return math.fsum(table.max(axis=0)) / gt_ids.size


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of ``min(R, C)`` pairs.

    Rectangular inputs are padded to square with ``max(cost) + 1``; since
    every padded row (or column) must be matched, the constant shifts all
    complete assignments equally and does not change the optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise UsageError("hungarian needs a non-empty 2-D cost matrix")
    if not np.all(np.isfinite(cost)):
        raise UsageError("hungarian needs finite costs")
    R, C = cost.shape
    n = max(R, C)
    a = np.full((n, n), cost.max() + 1.0)
    a[:R, :C] = cost
    # shortest augmenting path with row/column potentials (1-based, column 0 is a sentinel)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = sorted((int(p[j]) - 1, j - 1) for j in range(1, n + 1) if p[j] - 1 < R and j - 1 < C)
    return Assignment(pairs, math.fsum(cost[r, c] for r, c in pairs))


def miou(pred, gt, ignore=DEFAULT_IGNORE):
    """Mean IoU under the optimal one-to-one matching; unmatched gt masks score 0."""
    table, _, gt_ids = iou_table(pred, gt, ignore)
    if gt_ids.size == 0:
        return NO_GT
    if table.shape[0] == 0:
        return 0.0
    match = hungarian(-table.T)
    return math.fsum(table[c, r] for r, c in match.pairs) / gt_ids.size


def image_metrics(pred, gt_instances, gt_classes, ignore=DEFAULT_IGNORE) -> dict:
    return {
        "mbo_i": mbo(pred, gt_instances, ignore),
        "mbo_c": mbo(pred, gt_classes, ignore),
        "miou": miou(pred, gt_instances, ignore),
    }
