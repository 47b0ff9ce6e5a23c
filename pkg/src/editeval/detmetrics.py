"""Detection matching, COCO-style AP and the coherence metrics.

Conventions:

* IoU thresholds 0.50:0.05:0.95; a prediction matches at IoU >= threshold.
* Greedy matching by descending confidence; each prediction takes the
  unmatched ground truth with highest IoU (first in input order on ties).
* AP uses 101-point interpolated precision over a single ranked list pooled
  across all cases. Ties in confidence keep case_id order, then input order.
* Size buckets use absolute pixel areas: medium [32², 96²), large >= 96².
  Ground truths outside the bucket are flagged ignored: a prediction prefers
  non-ignored matches, a prediction matched to an ignored ground truth is
  dropped from the ranking, and so is an unmatched prediction whose own area
  is outside the bucket.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Sequence

import numpy as np

from . import kernels
from .core import CoherenceVerdict, Difference, EditCase, EditCommand, GroundTruthDifference, pixel_area

IOU_THRESHOLDS = np.round(0.5 + 0.05 * np.arange(10), 2)
AREA_RANGES: dict[str, tuple[float, float]] = {
    "all": (0.0, float("inf")),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}
CLASS_AGNOSTIC = "class_agnostic"
CLASS_AWARE = "class_aware"
_ANY = "*"


@dataclass(frozen=True)
class MatchResult:
    """Matching of one case's predictions against its ground truths.

    ``order`` lists prediction indices by descending confidence; ``tp`` and
    ``ignored`` are (T, n) in that order; ``gt_matched`` is (T, m) in ground
    truth input order.
    """

    thresholds: np.ndarray
    order: np.ndarray
    confidences: np.ndarray
    tp: np.ndarray
    ignored: np.ndarray
    gt_matched: np.ndarray
    num_gts: int


@dataclass
class APReport:
    mode: str
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_m: float | None
    ap_l: float | None
    per_class: dict[str, float | None] = field(default_factory=dict)
    num_cases: int = 0
    num_gts: int = 0
    num_predictions: int = 0

    def to_json(self) -> dict[str, Any]:
        def r(v: float | None) -> float | None:
            return None if v is None else round(float(v), 6)

        d: dict[str, Any] = {
            "mode": self.mode,
            "ap": r(self.ap),
            "ap50": r(self.ap50),
            "ap75": r(self.ap75),
            "ap_m": r(self.ap_m),
            "ap_l": r(self.ap_l),
            "num_cases": self.num_cases,
            "num_gts": self.num_gts,
            "num_predictions": self.num_predictions,
        }
        mnemonics = {"ADD": "ap_add", "REMOVE": "ap_rem", "EDIT": "ap_edit"}
        for key, value in self.per_class.items():
            d[mnemonics.get(key, f"ap_{key}")] = r(value)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _match_arrays(
    pred_boxes: np.ndarray,
    pred_conf: np.ndarray,
    pred_area_ok: np.ndarray,
    gt_boxes: np.ndarray,
    gt_ignore: np.ndarray,
    thresholds: np.ndarray,
) -> MatchResult:
    order = np.argsort(-pred_conf, kind="stable")
    ious = kernels.iou_matrix(pred_boxes[order], gt_boxes)
    allowed = np.ones(ious.shape, dtype=bool)
    pred_match, gt_match = kernels.greedy_match(ious, allowed, gt_ignore, thresholds)
    matched = pred_match >= 0
    hit_ignored = matched & gt_ignore[np.maximum(pred_match, 0)] if len(gt_ignore) else matched
    tp = matched & ~hit_ignored
    ignored = hit_ignored | (~matched & ~pred_area_ok[order][None, :])
    return MatchResult(
        thresholds=thresholds,
        order=order,
        confidences=pred_conf[order],
        tp=tp,
        ignored=ignored,
        gt_matched=(gt_match >= 0) & ~gt_ignore[None, :],
        num_gts=int((~gt_ignore).sum()),
    )


def _boxes(items: Sequence[Difference | GroundTruthDifference]) -> np.ndarray:
    if not items:
        return np.zeros((0, 4))
    return np.array([it.bbox.as_tuple() for it in items], dtype=np.float64)


def match_detections(
    preds: Sequence[Difference],
    gts: Sequence[GroundTruthDifference],
    iou_threshold: float | Sequence[float],
    class_aware: bool,
) -> MatchResult:
    """Greedy matching of one case at one or several IoU thresholds.

    In class-aware mode a prediction may only match a ground truth carrying the
    same command; matching is then equivalent to running each command alone.
    """
    thresholds = np.atleast_1d(np.asarray(iou_threshold, dtype=np.float64))
    if np.any((thresholds <= 0) | (thresholds > 1)):
        raise ValueError("IoU threshold must lie in (0, 1]")
    conf = np.array([p.confidence for p in preds], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    pb = _boxes(preds)[order]
    gb = _boxes(gts)
    ious = kernels.iou_matrix(pb, gb)
    if class_aware:
        pc = np.array([preds[i].command.value for i in order], dtype=object)
        gc = np.array([g.command.value for g in gts], dtype=object)
        allowed = pc[:, None] == gc[None, :] if len(pc) and len(gc) else np.zeros(ious.shape, bool)
    else:
        allowed = np.ones(ious.shape, dtype=bool)
    pred_match, gt_match = kernels.greedy_match(
        ious, np.asarray(allowed, dtype=bool), np.zeros(len(gts), dtype=bool), thresholds
    )
    tp = pred_match >= 0
    return MatchResult(
        thresholds=thresholds,
        order=order,
        confidences=conf[order],
        tp=tp,
        ignored=np.zeros_like(tp),
        gt_matched=gt_match >= 0,
        num_gts=len(gts),
    )


def average_precision(match: MatchResult, num_gts: int | None = None) -> float:
    """AP of one ranked list, averaged over the match's thresholds."""
    n_gt = match.num_gts if num_gts is None else num_gts
    if n_gt < 0:
        raise ValueError("num_gts must be non-negative")
    aps = [
        kernels.interpolated_ap(match.tp[t][~match.ignored[t]], n_gt)
        for t in range(len(match.thresholds))
    ]
    return float(np.mean(aps))


@dataclass
class _Pool:
    """Ranked predictions pooled across cases for one class and size bucket."""

    conf: list[np.ndarray] = field(default_factory=list)
    tp: list[np.ndarray] = field(default_factory=list)
    ignored: list[np.ndarray] = field(default_factory=list)
    num_gts: int = 0

    def add(self, m: MatchResult) -> None:
        self.conf.append(m.confidences)
        self.tp.append(m.tp)
        self.ignored.append(m.ignored)
        self.num_gts += m.num_gts

    def ap_per_threshold(self, n_thr: int) -> np.ndarray | None:
        if not self.conf:
            return None
        conf = np.concatenate(self.conf)
        tp = np.concatenate(self.tp, axis=1)
        ign = np.concatenate(self.ignored, axis=1)
        if self.num_gts == 0:
            # no reference objects: undefined unless something was predicted
            return None if np.all(ign) else np.zeros(n_thr)
        order = np.argsort(-conf, kind="stable")
        tp, ign = tp[:, order], ign[:, order]
        return np.array(
            [kernels.interpolated_ap(tp[t][~ign[t]], self.num_gts) for t in range(n_thr)]
        )


def _evaluate(
    cases: Iterable[tuple[Sequence[Difference], EditCase, Sequence[Hashable]]],
    class_of_gt: Callable[[GroundTruthDifference], Hashable],
    classes: Sequence[Hashable],
    mode: str,
    class_names: Callable[[Hashable], str] = str,
) -> APReport:
    thresholds = IOU_THRESHOLDS
    pools = {(c, r): _Pool() for c in classes for r in AREA_RANGES}
    rows = sorted(cases, key=lambda row: row[1].case_id)
    n_pred = n_gt = 0
    for preds, case, pred_classes in rows:
        if case.ground_truth is None:
            raise ValueError(f"case {case.case_id} has no ground truth")
        gts = case.ground_truth
        n_pred += len(preds)
        n_gt += len(gts)
        p_area = np.array([pixel_area(p.bbox, case.width, case.height) for p in preds])
        g_area = np.array([pixel_area(g.bbox, case.width, case.height) for g in gts])
        g_cls = [class_of_gt(g) for g in gts]
        for c in classes:
            p_idx = [i for i, pc in enumerate(pred_classes) if pc == c]
            g_idx = [j for j, gc in enumerate(g_cls) if gc == c]
            if not p_idx and not g_idx:
                continue
            pb = _boxes([preds[i] for i in p_idx])
            pconf = np.array([preds[i].confidence for i in p_idx], dtype=np.float64)
            gb = _boxes([gts[j] for j in g_idx])
            ga = g_area[g_idx] if g_idx else np.zeros(0)
            pa = p_area[p_idx] if p_idx else np.zeros(0)
            for rname, (lo, hi) in AREA_RANGES.items():
                g_ignore = (ga < lo) | (ga >= hi)
                area_ok = (pa >= lo) & (pa < hi)
                m = _match_arrays(pb, pconf, area_ok, gb, g_ignore, thresholds)
                pools[(c, rname)].add(m)

    def bucket(rname: str, t_sel: slice | int | None) -> tuple[float | None, dict[Hashable, float | None]]:
        per: dict[Hashable, float | None] = {}
        for c in classes:
            aps = pools[(c, rname)].ap_per_threshold(len(thresholds))
            if aps is None:
                per[c] = None
            elif t_sel is None:
                per[c] = float(aps.mean())
            else:
                per[c] = float(aps[t_sel])
        vals = [v for v in per.values() if v is not None]
        return (float(np.mean(vals)) if vals else None), per

    idx50 = int(np.argmin(np.abs(thresholds - 0.5)))
    idx75 = int(np.argmin(np.abs(thresholds - 0.75)))
    ap, per_class = bucket("all", None)
    report = APReport(
        mode=mode,
        ap=ap,
        ap50=bucket("all", idx50)[0],
        ap75=bucket("all", idx75)[0],
        ap_m=bucket("medium", None)[0],
        ap_l=bucket("large", None)[0],
        per_class={class_names(c): v for c, v in per_class.items()} if len(classes) > 1 else {},
        num_cases=len(rows),
        num_gts=n_gt,
        num_predictions=n_pred,
    )
    return report


def evaluate_detection(
    cases: Iterable[tuple[Sequence[Difference], EditCase]],
    mode: str = CLASS_AGNOSTIC,
) -> APReport:
    """AP suite over a dataset. ``cases`` pairs each case with its predictions."""
    if mode == CLASS_AGNOSTIC:
        rows = [(preds, case, [_ANY] * len(preds)) for preds, case in cases]
        return _evaluate(rows, lambda g: _ANY, [_ANY], mode)
    if mode == CLASS_AWARE:
        rows = [(preds, case, [p.command for p in preds]) for preds, case in cases]
        return _evaluate(
            rows,
            lambda g: g.command,
            [EditCommand.ADD, EditCommand.REMOVE, EditCommand.EDIT],
            mode,
            class_names=lambda c: c.value,
        )
    raise ValueError(f"unknown mode {mode!r}")


def _decision(v: CoherenceVerdict | bool) -> bool:
    return bool(v.decision if isinstance(v, CoherenceVerdict) else v)


def coherence_accuracy(
    gts: Sequence[GroundTruthDifference], verdicts: Sequence[CoherenceVerdict | bool]
) -> float:
    if len(gts) != len(verdicts):
        raise ValueError(f"{len(verdicts)} verdicts for {len(gts)} ground truths")
    if not gts:
        raise ValueError("coherence accuracy needs at least one labeled difference")
    hits = 0
    for g, v in zip(gts, verdicts):
        if g.coherent is None:
            raise ValueError(f"ground truth {g.subject!r} has no coherence label")
        hits += g.coherent == _decision(v)
    return hits / len(gts)


def evaluate_coherence_ap(
    cases: Iterable[tuple[Sequence[Difference], Sequence[CoherenceVerdict | bool], EditCase]],
) -> APReport:
    """Two-category AP where the category is the coherence label."""
    rows = []
    for preds, verdicts, case in cases:
        if len(preds) != len(verdicts):
            raise ValueError(f"case {case.case_id}: {len(verdicts)} verdicts for {len(preds)} predictions")
        for g in case.ground_truth or ():
            if g.coherent is None:
                raise ValueError(f"case {case.case_id}: ground truth {g.subject!r} lacks a coherence label")
        rows.append((preds, case, [_decision(v) for v in verdicts]))
    return _evaluate(
        rows,
        lambda g: bool(g.coherent),
        [True, False],
        "coherence",
        class_names=lambda c: "coherent" if c else "non_coherent",
    )
