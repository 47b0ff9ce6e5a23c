"""Composite evaluation: masked CLIP-style similarities, ranking axes, correlations."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import numpy as np
from scipy import stats

from . import kernels
from .core import RGB, CoherenceVerdict, Difference, EditCase, Image, NormalizedBBox, fill_regions


class Embedder(Protocol):
    def embed_image(self, image: Image, case_id: str = "") -> np.ndarray: ...

    def embed_text(self, text: str, case_id: str = "") -> np.ndarray: ...


class PolicyKind(str, enum.Enum):
    NONE = "none"
    COHERENT = "coherent_differences"
    NON_COHERENT = "non_coherent_differences"
    ALL = "all_differences"
    RANDOM = "random_areas"


@dataclass(frozen=True)
class MaskPolicy:
    kind: PolicyKind = PolicyKind.NONE
    fill: RGB = (0, 0, 0)
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind is PolicyKind.RANDOM and self.seed is None:
            raise ValueError("random_areas policy needs a seed")

    @property
    def name(self) -> str:
        return self.kind.value

    def boxes(
        self, case_id: str, diffs: Sequence[Difference], verdicts: Sequence[CoherenceVerdict | None]
    ) -> list[NormalizedBBox]:
        """Regions to patch. Differences without a verdict count for ``all`` and ``random`` only."""
        if len(diffs) != len(verdicts):
            raise ValueError("differences and verdicts must align")
        k = self.kind
        if k is PolicyKind.NONE:
            return []
        if k is PolicyKind.ALL:
            return [d.bbox for d in diffs]
        if k is PolicyKind.COHERENT:
            return [d.bbox for d, v in zip(diffs, verdicts) if v is not None and v.decision]
        if k is PolicyKind.NON_COHERENT:
            return [d.bbox for d, v in zip(diffs, verdicts) if v is not None and not v.decision]
        # same-size boxes placed uniformly, one per detected difference
        digest = hashlib.sha256(case_id.encode("utf-8")).digest()
        rng = np.random.default_rng([int(self.seed), int.from_bytes(digest[:8], "big")])  # type: ignore[arg-type]
        out = []
        for d in diffs:
            w, h = d.bbox.width, d.bbox.height
            x0 = float(rng.uniform(0.0, 1.0 - w)) if w < 1.0 else 0.0
            y0 = float(rng.uniform(0.0, 1.0 - h)) if h < 1.0 else 0.0
            out.append(NormalizedBBox(x0, y0, min(1.0, x0 + w), min(1.0, y0 + h)))
        return out

    def apply(self, image: Image, boxes: Sequence[NormalizedBBox]) -> Image:
        # no boxes: hand back the very same image
        return fill_regions(image, boxes, self.fill) if boxes else image


STANDARD_POLICIES = tuple(PolicyKind)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0 or not math.isfinite(denom):
        raise ValueError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def masked_pair(
    case: EditCase,
    images: tuple[Image, Image],
    diffs: Sequence[Difference],
    verdicts: Sequence[CoherenceVerdict | None],
    policy: MaskPolicy,
) -> tuple[Image, Image]:
    boxes = policy.boxes(case.case_id, diffs, verdicts)
    return policy.apply(images[0], boxes), policy.apply(images[1], boxes)


def clip_i(
    embedder: Embedder,
    case: EditCase,
    images: tuple[Image, Image],
    diffs: Sequence[Difference],
    verdicts: Sequence[CoherenceVerdict | None],
    policy: MaskPolicy,
) -> float:
    """Similarity of original and edited image after patching both at the policy's boxes."""
    original, edited = masked_pair(case, images, diffs, verdicts, policy)
    return cosine(embedder.embed_image(original, case.case_id), embedder.embed_image(edited, case.case_id))


def clip_t(
    embedder: Embedder,
    case: EditCase,
    edited: Image,
    diffs: Sequence[Difference],
    verdicts: Sequence[CoherenceVerdict | None],
    target_caption: str,
    policy: MaskPolicy,
) -> float:
    """Similarity of the target caption and the edited image patched at the policy's boxes."""
    masked = policy.apply(edited, policy.boxes(case.case_id, diffs, verdicts))
    return cosine(embedder.embed_image(masked, case.case_id), embedder.embed_text(target_caption, case.case_id))


# --- ranking -------------------------------------------------------------------


@dataclass(frozen=True)
class CaseOutcome:
    case_id: str
    differences: tuple[Difference, ...]
    verdicts: tuple[CoherenceVerdict | None, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "differences", tuple(self.differences))
        object.__setattr__(self, "verdicts", tuple(self.verdicts))
        if len(self.differences) != len(self.verdicts):
            raise ValueError(f"case {self.case_id}: differences and verdicts must align")


@dataclass(frozen=True)
class RankingRow:
    model: str
    correct_edits_pct: float
    unwanted_edit_area_pct: float
    no_visual_change_pct: float
    num_cases: int

    def to_json(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "correct_edits_pct": round(self.correct_edits_pct, 6),
            "unwanted_edit_area_pct": round(self.unwanted_edit_area_pct, 6),
            "no_visual_change_pct": round(self.no_visual_change_pct, 6),
            "num_cases": self.num_cases,
        }


_RANK_COLS = ("model", "correct_edits_pct", "unwanted_edit_area_pct", "no_visual_change_pct", "num_cases")


@dataclass(frozen=True)
class RankingReport:
    rows: tuple[RankingRow, ...]
    confidence_floor: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {"confidence_floor": self.confidence_floor, "rows": [r.to_json() for r in self.rows]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_RANK_COLS)
        for r in self.rows:
            j = r.to_json()
            w.writerow([j[c] for c in _RANK_COLS])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ("Model", "Correct edits %", "Unwanted edits %", "No visual change %", "Cases")
        body = [
            (r.model, f"{r.correct_edits_pct:.1f}", f"{r.unwanted_edit_area_pct:.1f}", f"{r.no_visual_change_pct:.1f}", str(r.num_cases))
            for r in self.rows
        ]
        return _table(header, body)


def _case_axes(o: CaseOutcome, floor: float) -> tuple[bool, float, bool]:
    kept = [(d, v) for d, v in zip(o.differences, o.verdicts) if d.confidence >= floor]
    correct = any(v is not None and v.decision for _, v in kept)
    bad = [d.bbox.as_tuple() for d, v in kept if v is not None and not v.decision]
    area = min(1.0, kernels.union_area(np.array(bad))) if bad else 0.0
    return correct, area, not kept


def ranking_axes(model_runs: Mapping[str, Sequence[CaseOutcome]], confidence_floor: float = 0.0) -> RankingReport:
    """Per model: % cases with a coherent difference, mean % area under the union of
    non-coherent boxes, % cases without differences. Differences below the
    confidence floor are ignored on all three axes."""
    if not model_runs:
        raise ValueError("no model runs given")
    reference: frozenset[str] | None = None
    rows = []
    for model in sorted(model_runs):
        outcomes = model_runs[model]
        ids = [o.case_id for o in outcomes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"model {model}: duplicate case ids")
        if reference is None:
            reference = frozenset(ids)
        elif frozenset(ids) != reference:
            raise ValueError(f"model {model} was evaluated on a different case set")
        if not outcomes:
            raise ValueError(f"model {model} has no cases")
        axes = [_case_axes(o, confidence_floor) for o in sorted(outcomes, key=lambda o: o.case_id)]
        n = len(axes)
        rows.append(
            RankingRow(
                model,
                100.0 * sum(a[0] for a in axes) / n,
                100.0 * math.fsum(a[1] for a in axes) / n,
                100.0 * sum(a[2] for a in axes) / n,
                n,
            )
        )
    return RankingReport(tuple(rows), confidence_floor)


# --- correlation ---------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationReport:
    pearson: float
    spearman: float
    kendall: float
    n: int

    def to_json(self) -> dict[str, Any]:
        return {
            "pearson": round(self.pearson, 9),
            "spearman": round(self.spearman, 9),
            "kendall": round(self.kendall, 9),
            "n": self.n,
        }


def correlate(metric_scores: Sequence[float], human_scores: Sequence[float]) -> CorrelationReport:
    """Pearson, Spearman (average ranks for ties) and Kendall tau-b."""
    x = np.asarray(metric_scores, dtype=np.float64)
    y = np.asarray(human_scores, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("score lists must have equal length")
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("scores must be finite")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise ValueError("undefined correlation")
    p = float(stats.pearsonr(x, y).statistic)
    s = float(stats.spearmanr(x, y).statistic)
    k = float(stats.kendalltau(x, y, variant="b").statistic)
    return CorrelationReport(_unit(p), _unit(s), _unit(k), int(x.size))


def _unit(v: float) -> float:
    # rank coefficients are integer ratios whose nearest non-unit value sits far
    # further from +-1 than 1e-12, so a value that close is +-1 up to rounding
    if abs(abs(v) - 1.0) < 1e-12:
        return math.copysign(1.0, v)
    return float(min(1.0, max(-1.0, v)))


STUDY_ROWS: tuple[tuple[str, PolicyKind, str], ...] = (
    ("clip_i", PolicyKind.NONE, "background_preservation"),
    ("clip_i", PolicyKind.RANDOM, "background_preservation"),
    ("clip_i", PolicyKind.ALL, "background_preservation"),
    ("clip_i", PolicyKind.COHERENT, "background_preservation"),
    ("clip_t", PolicyKind.NONE, "prompt_adherence"),
    ("clip_t", PolicyKind.RANDOM, "prompt_adherence"),
    ("clip_t", PolicyKind.ALL, "prompt_adherence"),
    ("clip_t", PolicyKind.NON_COHERENT, "prompt_adherence"),
)


@dataclass(frozen=True)
class StudyRow:
    metric: str
    policy: str
    human_dimension: str
    result: CorrelationReport | None
    n: int
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "metric": self.metric,
            "policy": self.policy,
            "human_dimension": self.human_dimension,
            "n": self.n,
            "error": self.error,
        }
        r = self.result
        d.update(
            pearson=None if r is None else round(r.pearson, 9),
            spearman=None if r is None else round(r.spearman, 9),
            kendall=None if r is None else round(r.kendall, 9),
        )
        return d


@dataclass(frozen=True)
class CorrelationTable:
    rows: tuple[StudyRow, ...]
    aggregation: str
    excluded_missing_ratings: int
    excluded_score_errors: int = 0
    notes: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "aggregation": self.aggregation,
            "excluded_missing_ratings": self.excluded_missing_ratings,
            "excluded_score_errors": self.excluded_score_errors,
            "rows": [r.to_json() for r in self.rows],
            **self.notes,
        }

    def to_csv(self) -> str:
        cols = ("metric", "policy", "human_dimension", "pearson", "spearman", "kendall", "n", "error")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            j = r.to_json()
            w.writerow(["" if j[c] is None else j[c] for c in cols])
        return buf.getvalue()

    def to_text(self) -> str:
        def f(v: float | None) -> str:
            return "-" if v is None else f"{100 * v:.1f}"

        header = ("Metric", "Masking", "Human rating", "Pearson", "Spearman", "Kendall", "N")
        body = []
        for r in self.rows:
            res = r.result
            vals = (None, None, None) if res is None else (res.pearson, res.spearman, res.kendall)
            body.append((r.metric.upper().replace("_", "-"), r.policy, r.human_dimension, *map(f, vals), str(r.n)))
        text = _table(header, body)
        errs = [f"{r.metric}/{r.policy}: {r.error}" for r in self.rows if r.error]
        if errs:
            text += "".join(f"! {e}\n" for e in errs)
        return text


def correlation_study(
    scores: Mapping[tuple[str, str], Mapping[str, float]],
    ratings: Mapping[str, Any],
    groups: Mapping[str, str] | None = None,
) -> CorrelationTable:
    """Eight-row table of metric/policy scores against human ratings.

    ``scores[(metric, policy)]`` maps case_id to a score; cases missing from a
    row (scoring failed) are left out of that row. ``ratings`` maps case_id to
    HumanRatings or None; unrated cases are excluded everywhere. With
    ``groups`` (case_id -> group label, e.g. editing model) scores and ratings
    are averaged per group before correlating.
    """
    rated = {cid: r for cid, r in ratings.items() if r is not None}
    missing = sum(1 for r in ratings.values() if r is None)
    all_ids = set(rated)
    rows = []
    score_errors: set[str] = set()
    for metric, kind, dim in STUDY_ROWS:
        per_case = scores.get((metric, kind.value), {})
        ids = sorted(cid for cid in rated if cid in per_case)
        score_errors |= all_ids - set(ids)
        xs = [float(per_case[cid]) for cid in ids]
        ys = [float(getattr(rated[cid], dim)) for cid in ids]
        if groups is not None:
            xs, ys = _group_means(ids, xs, ys, groups)
        try:
            res = correlate(xs, ys)
            rows.append(StudyRow(metric, kind.value, dim, res, len(xs)))
        except ValueError as exc:
            rows.append(StudyRow(metric, kind.value, dim, None, len(xs), str(exc)))
    return CorrelationTable(tuple(rows), "per_case" if groups is None else "group_mean", missing, len(score_errors))


def _group_means(ids: Sequence[str], xs: Sequence[float], ys: Sequence[float], groups: Mapping[str, str]):
    acc: dict[str, list[tuple[float, float]]] = {}
    for cid, x, y in zip(ids, xs, ys):
        acc.setdefault(groups[cid], []).append((x, y))
    keys = sorted(acc)
    return (
        [math.fsum(p[0] for p in acc[k]) / len(acc[k]) for k in keys],
        [math.fsum(p[1] for p in acc[k]) / len(acc[k]) for k in keys],
    )


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    def line(cells: Sequence[str]) -> str:
        return "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *map(line, rows)]) + "\n"
