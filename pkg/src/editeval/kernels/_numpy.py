"""Vectorised numpy implementations of the hot kernels.

Every function here has a twin in ``_numba`` with identical signature and
semantics; ``tests/test_kernels.py`` checks the two agree.
"""

from __future__ import annotations

import numpy as np

RECALL_GRID = np.arange(101) / 100.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boxes ``a`` (n, 4) and ``b`` (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0.0, None) * np.clip(iy1 - iy0, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def greedy_match(
    ious: np.ndarray, allowed: np.ndarray, gt_ignore: np.ndarray, thresholds: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy one-to-one matching at each IoU threshold.

    Rows of ``ious`` must already be in descending-confidence order. Each
    prediction takes the unmatched, allowed ground truth with the highest
    IoU >= threshold (first index on ties), preferring ground truths not
    flagged in ``gt_ignore`` and falling back to ignored ones.

    Returns ``(pred_match, gt_match)`` of shapes (T, n) and (T, m) holding the
    partner index or -1.
    """
    n, m = ious.shape
    t_count = len(thresholds)
    pred_match = np.full((t_count, n), -1, dtype=np.int64)
    gt_match = np.full((t_count, m), -1, dtype=np.int64)
    if n == 0 or m == 0:
        return pred_match, gt_match
    masked = np.where(allowed, ious, -1.0)
    ignore = np.asarray(gt_ignore, dtype=bool)
    thr = np.asarray(thresholds, dtype=np.float64)[:, None]
    rows = np.arange(t_count)
    # thresholds are independent, so all of them advance together prediction by prediction
    free = np.ones((t_count, m), dtype=bool)
    for i in range(n):
        ok = free & (masked[i][None, :] >= thr)
        preferred = ok & ~ignore
        pool = np.where(preferred.any(axis=1)[:, None], preferred, ok)
        hit = pool.any(axis=1)
        if not hit.any():
            continue
        j = np.argmax(np.where(pool, masked[i][None, :], -1.0), axis=1)
        t_hit, j_hit = rows[hit], j[hit]
        pred_match[t_hit, i] = j_hit
        gt_match[t_hit, j_hit] = i
        free[t_hit, j_hit] = False
    return pred_match, gt_match


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP for a ranked list of TP flags."""
    tp = np.asarray(tp, dtype=np.float64)
    if num_gt == 0:
        return 0.0 if len(tp) else 1.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.sum() / len(RECALL_GRID))


def union_area(boxes: np.ndarray) -> float:
    """Exact area of the union of axis-aligned boxes (k, 4)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return 0.0
    xs = np.unique(boxes[:, [0, 2]])
    ys = np.unique(boxes[:, [1, 3]])
    cx = (xs[:-1] + xs[1:]) / 2
    cy = (ys[:-1] + ys[1:]) / 2
    inside_x = (boxes[:, None, 0] <= cx[None, :]) & (cx[None, :] < boxes[:, None, 2])
    inside_y = (boxes[:, None, 1] <= cy[None, :]) & (cy[None, :] < boxes[:, None, 3])
    covered = np.any(inside_x[:, :, None] & inside_y[:, None, :], axis=0)
    cell = np.diff(xs)[:, None] * np.diff(ys)[None, :]
    return float((cell * covered).sum())


def similar_pairs(
    emb: np.ndarray, threshold: float, block: int = 1024
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All index pairs i < j with dot(emb[i], emb[j]) > threshold."""
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    n = len(emb)
    ii, jj, ss = [], [], []
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = emb[start:stop] @ emb.T
        rows, cols = np.nonzero(sims > threshold)
        keep = cols > rows + start
        ii.append(rows[keep] + start)
        jj.append(cols[keep])
        ss.append(sims[rows[keep], cols[keep]])
    if not ii:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    return (
        np.concatenate(ii).astype(np.int64),
        np.concatenate(jj).astype(np.int64),
        np.concatenate(ss),
    )
