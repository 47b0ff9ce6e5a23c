"""numba-compiled loop kernels. Same contracts as ``_numpy``."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _iou_matrix(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            w = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            h = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if w <= 0.0 or h <= 0.0:
                continue
            inter = w * h
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    return _iou_matrix(a, b)


@njit(cache=True)
def _greedy_match(ious, allowed, gt_ignore, thresholds):
    n, m = ious.shape
    t_count = thresholds.shape[0]
    pred_match = np.full((t_count, n), -1, dtype=np.int64)
    gt_match = np.full((t_count, m), -1, dtype=np.int64)
    for t in range(t_count):
        thr = thresholds[t]
        for i in range(n):
            for phase in range(2):
                want_ignored = phase == 1
                best = -1.0
                best_j = -1
                for j in range(m):
                    if gt_match[t, j] >= 0 or not allowed[i, j] or gt_ignore[j] != want_ignored:
                        continue
                    v = ious[i, j]
                    if v >= thr and v > best:
                        best = v
                        best_j = j
                if best_j >= 0:
                    pred_match[t, i] = best_j
                    gt_match[t, best_j] = i
                    break
    return pred_match, gt_match


def greedy_match(ious, allowed, gt_ignore, thresholds):
    return _greedy_match(
        np.ascontiguousarray(ious, dtype=np.float64),
        np.ascontiguousarray(allowed, dtype=np.bool_),
        np.ascontiguousarray(gt_ignore, dtype=np.bool_),
        np.ascontiguousarray(thresholds, dtype=np.float64),
    )


@njit(cache=True)
def _interpolated_ap(tp, num_gt):
    n = tp.shape[0]
    if num_gt == 0:
        return 0.0 if n > 0 else 1.0
    if n == 0:
        return 0.0
    recall = np.empty(n)
    envelope = np.empty(n)
    ctp = 0.0
    for k in range(n):
        ctp += tp[k]
        recall[k] = ctp / num_gt
        envelope[k] = ctp / (k + 1)
    for k in range(n - 2, -1, -1):
        if envelope[k + 1] > envelope[k]:
            envelope[k] = envelope[k + 1]
    total = 0.0
    k = 0
    for g in range(101):
        r = g / 100.0
        while k < n and recall[k] < r:
            k += 1
        if k < n:
            total += envelope[k]
    return total / 101.0


def interpolated_ap(tp, num_gt: int) -> float:
    return float(_interpolated_ap(np.ascontiguousarray(tp, dtype=np.float64), int(num_gt)))


@njit(cache=True)
def _union_area(boxes):
    k = boxes.shape[0]
    xs = np.unique(np.concatenate((boxes[:, 0], boxes[:, 2])))
    ys = np.unique(np.concatenate((boxes[:, 1], boxes[:, 3])))
    total = 0.0
    for a in range(xs.shape[0] - 1):
        cx = 0.5 * (xs[a] + xs[a + 1])
        for c in range(ys.shape[0] - 1):
            cy = 0.5 * (ys[c] + ys[c + 1])
            for i in range(k):
                if boxes[i, 0] <= cx < boxes[i, 2] and boxes[i, 1] <= cy < boxes[i, 3]:
                    total += (xs[a + 1] - xs[a]) * (ys[c + 1] - ys[c])
                    break
    return total


def union_area(boxes) -> float:
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    if boxes.shape[0] == 0:
        return 0.0
    return float(_union_area(boxes))


@njit(cache=True)
def _similar_pairs(emb, emb_t, threshold, block):
    n = emb.shape[0]
    ii = np.empty(0, dtype=np.int64)
    jj = np.empty(0, dtype=np.int64)
    ss = np.empty(0)
    count = 0
    for start in range(0, n, block):
        stop = min(start + block, n)
        # BLAS-backed block of the Gram matrix, scanned above the diagonal
        sims = np.dot(emb[start:stop], emb_t)
        hits = 0
        for r in range(stop - start):
            for j in range(start + r + 1, n):
                if sims[r, j] > threshold:
                    hits += 1
        if count + hits > ii.shape[0]:
            cap = max(2 * ii.shape[0], count + hits)
            ii2 = np.empty(cap, dtype=np.int64)
            jj2 = np.empty(cap, dtype=np.int64)
            ss2 = np.empty(cap)
            ii2[:count] = ii[:count]
            jj2[:count] = jj[:count]
            ss2[:count] = ss[:count]
            ii, jj, ss = ii2, jj2, ss2
        for r in range(stop - start):
            i = start + r
            for j in range(i + 1, n):
                s = sims[r, j]
                if s > threshold:
                    ii[count] = i
                    jj[count] = j
                    ss[count] = s
                    count += 1
    return ii[:count], jj[:count], ss[:count]


def similar_pairs(emb, threshold: float, block: int = 1024):
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    return _similar_pairs(emb, np.ascontiguousarray(emb.T), float(threshold), int(block))
