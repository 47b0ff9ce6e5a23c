"""Training-data construction: mined similar-image pairs and inpainting manifests.

Both pipelines are deterministic for a given input and seed. Inpainting,
captioning and embedding are external; this module only decides *what* to
generate and writes it down as JSONL.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .core import EditCommand, GroundTruthDifference, NormalizedBBox, SchemaError, iou

log = logging.getLogger(__name__)

JPEG_QUALITIES = (15, 50)
INPAINT_STEPS = 100
INPAINT_GUIDANCE = 4.0
COLOR_CHANGE_FRACTION = 0.3
MIN_AREA_FRACTION = 0.03
MAX_MASK_OVERLAP = 0.05
MAX_OBJECTS = 4
# 19k of 97k training images were left unchanged
DEFAULT_UNCHANGED = 19 / 97


@dataclass(frozen=True)
class AnnotatedObject:
    class_name: str
    bbox: NormalizedBBox
    mask_ref: str | None = None

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {"class_name": self.class_name, "bbox": self.bbox.to_list()}
        if self.mask_ref is not None:
            d["mask_ref"] = self.mask_ref
        return d


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    image_id: str
    width: int
    height: int
    objects: tuple[AnnotatedObject, ...] = ()
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: width and height must be positive")
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.embedding is not None:
            emb = np.asarray(self.embedding, dtype=np.float64).ravel()
            norm = float(np.linalg.norm(emb))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"image {self.image_id}: embedding norm {norm:.8f} is not 1")
            emb.flags.writeable = False
            object.__setattr__(self, "embedding", emb)

    @property
    def classes(self) -> frozenset[str]:
        return frozenset(o.class_name for o in self.objects)

    @classmethod
    def from_json(cls, d: dict[str, Any], normalize: bool = False) -> "AnnotatedImage":
        emb = d.get("embedding")
        if emb is not None:
            emb = np.asarray(emb, dtype=np.float64)
            if normalize:
                emb = emb / np.linalg.norm(emb)
        return cls(
            image_id=str(d["image_id"]),
            width=int(d["width"]),
            height=int(d["height"]),
            objects=tuple(
                AnnotatedObject(o["class_name"], NormalizedBBox.from_list(o["bbox"]), o.get("mask_ref"))
                for o in d.get("objects", ())
            ),
            embedding=emb,
        )


@dataclass(frozen=True)
class Stage1Pair:
    image_a: str
    image_b: str
    cosine_similarity: float
    differing_classes: int
    labels: tuple[GroundTruthDifference, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "image_a": self.image_a,
            "image_b": self.image_b,
            "cosine_similarity": round(self.cosine_similarity, 9),
            "differing_classes": self.differing_classes,
            "labels": [g.to_json() for g in self.labels],
        }


def filter_small(
    objects: Iterable[AnnotatedObject], width: int, height: int, min_side_px: int = 16
) -> list[AnnotatedObject]:
    """Drop objects whose box is narrower or shorter than ``min_side_px`` pixels."""
    kept = []
    for o in objects:
        w_px = o.bbox.width * width
        h_px = o.bbox.height * height
        if w_px + 1e-9 >= min_side_px and h_px + 1e-9 >= min_side_px:
            kept.append(o)
    return kept


def mine_pairs(
    corpus: Sequence[AnnotatedImage],
    sim_threshold: float = 0.6,
    max_class_diff: int = 15,
) -> list[Stage1Pair]:
    """Unordered pairs with cosine > threshold, a shared class and few differing classes.

    Output is sorted by ``(image_a, image_b)`` with ``image_a < image_b``.
    """
    images = sorted(corpus, key=lambda im: im.image_id)
    seen: set[str] = set()
    for im in images:
        if im.image_id in seen:
            raise ValueError(f"duplicate image_id {im.image_id}")
        seen.add(im.image_id)
        if im.embedding is None:
            raise ValueError(f"image {im.image_id} has no embedding")
    if len(images) < 2:
        return []
    dims = {im.embedding.shape[0] for im in images}  # type: ignore[union-attr]
    if len(dims) != 1:
        raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
    emb = np.stack([im.embedding for im in images])
    # kernel screens with a small margin; the exact test below decides
    ii, jj, _ = kernels.similar_pairs(emb, sim_threshold - 1e-9)
    pairs = []
    for i, j in zip(ii.tolist(), jj.tolist()):
        a, b = images[i], images[j]
        sim = float(np.dot(a.embedding, b.embedding))  # type: ignore[arg-type]
        if not sim > sim_threshold:
            continue
        ca, cb = a.classes, b.classes
        if not ca & cb:
            continue
        diff = len(ca ^ cb)
        if diff >= max_class_diff:
            continue
        pairs.append(Stage1Pair(a.image_id, b.image_id, sim, diff))
    pairs.sort(key=lambda p: (p.image_a, p.image_b))
    return pairs


AbsenceVerifier = Callable[[AnnotatedObject, AnnotatedImage], bool]


def label_pair(
    a: AnnotatedImage,
    b: AnnotatedImage,
    edit_iou_threshold: float = 0.5,
    min_side_px: int = 16,
    absence_verifier: AbsenceVerifier | None = None,
) -> list[GroundTruthDifference]:
    """Set-difference labels for a pair, read as "a was edited into b".

    Objects whose class appears in both images are unchanged. Among the rest,
    cross-image pairs with different classes and IoU >= threshold become one
    EDIT at b's box (highest IoU first, each object used once). Leftover
    a-only objects are REMOVE, leftover b-only objects are ADD, one label per
    instance. ``absence_verifier(obj, other)`` may veto an ADD/REMOVE by
    returning False when the object is in fact visible in the other image.
    """
    objs_a = filter_small(a.objects, a.width, a.height, min_side_px)
    objs_b = filter_small(b.objects, b.width, b.height, min_side_px)
    cls_a = {o.class_name for o in objs_a}
    cls_b = {o.class_name for o in objs_b}
    only_a = [k for k, o in enumerate(objs_a) if o.class_name not in cls_b]
    only_b = [k for k, o in enumerate(objs_b) if o.class_name not in cls_a]

    candidates = []
    for i in only_a:
        for j in only_b:
            v = iou(objs_a[i].bbox, objs_b[j].bbox)
            if v >= edit_iou_threshold:
                candidates.append((-v, i, j))
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    edits = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        edits.append(j)

    labels = [
        GroundTruthDifference(EditCommand.EDIT, objs_b[j].class_name, objs_b[j].bbox) for j in sorted(edits)
    ]
    for i in only_a:
        if i in used_a:
            continue
        if absence_verifier is None or absence_verifier(objs_a[i], b):
            labels.append(GroundTruthDifference(EditCommand.REMOVE, objs_a[i].class_name, objs_a[i].bbox))
    for j in only_b:
        if j in used_b:
            continue
        if absence_verifier is None or absence_verifier(objs_b[j], a):
            labels.append(GroundTruthDifference(EditCommand.ADD, objs_b[j].class_name, objs_b[j].bbox))
    return labels


# --- stage 2 -----------------------------------------------------------------


@dataclass(frozen=True)
class OpBalance:
    """Target shares: ``unchanged`` is a share of images; the three operation
    shares are renormalized among themselves and apply to operations."""

    add: float = (1 - DEFAULT_UNCHANGED) / 3
    remove: float = (1 - DEFAULT_UNCHANGED) / 3
    edit: float = (1 - DEFAULT_UNCHANGED) / 3
    unchanged: float = DEFAULT_UNCHANGED

    def __post_init__(self) -> None:
        vals = (self.add, self.remove, self.edit, self.unchanged)
        if any(v < 0 for v in vals):
            raise ValueError("op balance proportions must be non-negative")
        if abs(sum(vals) - 1.0) > 1e-6:
            raise ValueError(f"op balance proportions must sum to 1, got {sum(vals):.6f}")
        if self.add + self.remove + self.edit <= 0:
            raise ValueError("at least one operation must have positive weight")

    def op_shares(self) -> dict[EditCommand, float]:
        total = self.add + self.remove + self.edit
        return {
            EditCommand.ADD: self.add / total,
            EditCommand.REMOVE: self.remove / total,
            EditCommand.EDIT: self.edit / total,
        }

    def to_json(self) -> dict[str, float]:
        return {k: round(getattr(self, k), 9) for k in ("add", "remove", "edit", "unchanged")}


@dataclass(frozen=True)
class Stage2Operation:
    op: EditCommand
    class_name: str
    bbox: NormalizedBBox
    mask_ref: str | None
    which_side: str
    edit_kind: str | None = None
    substitution_target: str | None = None
    steps: int = INPAINT_STEPS
    guidance: float = INPAINT_GUIDANCE

    def to_json(self) -> dict[str, Any]:
        return {
            "op": self.op.value,
            "target_object": {"class": self.class_name, "bbox": self.bbox.to_list(), "mask_ref": self.mask_ref},
            "edit_kind": self.edit_kind,
            "substitution_target": self.substitution_target,
            "inpaint_params": {"steps": self.steps, "guidance": self.guidance},
            "which_side": self.which_side,
        }


@dataclass(frozen=True)
class Stage2Record:
    image_id: str
    operations: tuple[Stage2Operation, ...]
    apply_probability: float = 0.5
    jpeg_quality: int | None = None

    @property
    def unchanged(self) -> bool:
        return not self.operations

    def to_json(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "unchanged": self.unchanged,
            "operations": [o.to_json() for o in self.operations],
            "augmentation": {
                "jpeg_qualities": list(JPEG_QUALITIES),
                "apply_probability": self.apply_probability,
                "jpeg_quality": self.jpeg_quality,
            },
        }


@dataclass(frozen=True)
class Stage2Manifest:
    records: tuple[Stage2Record, ...]
    seed: int
    balance: OpBalance
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def dumps(self) -> str:
        return "".join(
            json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n" for r in self.records
        )

    def summary(self) -> dict[str, Any]:
        ops = {c.value: 0 for c in EditCommand}
        kinds = {"color_change": 0, "substitution": 0}
        augmented = 0
        for r in self.records:
            augmented += r.jpeg_quality is not None
            for o in r.operations:
                ops[o.op.value] += 1
                if o.edit_kind:
                    kinds[o.edit_kind] += 1
        n_ops = sum(ops.values())
        n_img = len(self.records)
        unchanged = sum(r.unchanged for r in self.records)
        return {
            "images": n_img,
            "unchanged_images": unchanged,
            "unchanged_fraction": round(unchanged / n_img, 6) if n_img else 0.0,
            "operations": ops,
            "operation_fractions": {k: round(v / n_ops, 6) if n_ops else 0.0 for k, v in ops.items()},
            "edit_kinds": kinds,
            "augmented_images": augmented,
            "requested_balance": self.balance.to_json(),
            "seed": self.seed,
            "warnings": len(self.warnings),
        }


MaskLoader = Callable[[str], "np.ndarray | None"]


class _Geometry:
    """Area and overlap using masks when they resolve, boxes otherwise."""

    def __init__(self, image: AnnotatedImage, mask_loader: MaskLoader | None):
        self.image = image
        self.masks: dict[int, np.ndarray] = {}
        self.fallback = False
        for k, o in enumerate(image.objects):
            m = None
            if o.mask_ref is not None and mask_loader is not None:
                m = mask_loader(o.mask_ref)
                if m is not None and m.shape != (image.height, image.width):
                    m = None
            if m is None:
                self.fallback = True
            else:
                self.masks[k] = np.asarray(m, dtype=bool)

    def area_fraction(self, k: int) -> float:
        if k in self.masks:
            return float(self.masks[k].mean())
        return self.image.objects[k].bbox.area()

    def overlap(self, i: int, j: int) -> float:
        """Intersection over the smaller of the two regions."""
        if i in self.masks and j in self.masks:
            a, b = self.masks[i], self.masks[j]
            smaller = min(a.sum(), b.sum())
            return float((a & b).sum() / smaller) if smaller else 0.0
        bi, bj = self.image.objects[i].bbox, self.image.objects[j].bbox
        w = min(bi.x_max, bj.x_max) - max(bi.x_min, bj.x_min)
        h = min(bi.y_max, bj.y_max) - max(bi.y_min, bj.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h / min(bi.area(), bj.area())


def _quota(n: int, shares: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items to the given shares."""
    raw = [n * s for s in shares]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(shares)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def _select_objects(
    geom: _Geometry,
    rng: np.random.Generator,
    min_area: float,
    max_overlap: float,
    max_objects: int,
) -> list[int]:
    eligible = [k for k in range(len(geom.image.objects)) if geom.area_fraction(k) >= min_area]
    if not eligible:
        return []
    chosen: list[int] = []
    for k in rng.permutation(eligible).tolist():
        if all(geom.overlap(k, c) <= max_overlap for c in chosen):
            chosen.append(k)
            if len(chosen) == max_objects:
                break
    n = int(rng.integers(1, len(chosen) + 1))
    return sorted(chosen[:n])


def build_stage2_manifest(
    corpus: Sequence[AnnotatedImage],
    seed: int,
    op_balance: OpBalance | None = None,
    *,
    min_area_fraction: float = MIN_AREA_FRACTION,
    max_overlap: float = MAX_MASK_OVERLAP,
    max_objects: int = MAX_OBJECTS,
    color_change_fraction: float = COLOR_CHANGE_FRACTION,
    apply_probability: float = 0.5,
    mask_loader: MaskLoader | None = None,
) -> Stage2Manifest:
    """Pick objects and operations for inpainting-based edit pairs.

    Per image, up to ``max_objects`` objects covering at least
    ``min_area_fraction`` of the image and overlapping each other by at most
    ``max_overlap`` are sampled. A quota of images is kept unchanged; the
    remaining objects receive ADD/REMOVE/EDIT labels apportioned to the
    requested shares and shuffled. EDITs are color changes with probability
    ``color_change_fraction`` and substitutions otherwise, leaving the
    substitution target empty for an external captioning service.
    """
    balance = op_balance or OpBalance()
    rng = np.random.default_rng(seed)
    images = sorted(corpus, key=lambda im: im.image_id)
    fallback: list[str] = []
    selections: list[list[int]] = []
    for im in images:
        geom = _Geometry(im, mask_loader)
        if geom.fallback and im.objects:
            fallback.append(im.image_id)
        selections.append(_select_objects(geom, rng, min_area_fraction, max_overlap, max_objects))
    warnings: list[str] = []
    if fallback:
        shown = ", ".join(fallback[:5]) + (", ..." if len(fallback) > 5 else "")
        warnings.append(f"masks unavailable for {len(fallback)} image(s) ({shown}); using box area/overlap")
        log.warning(warnings[0])

    n = len(images)
    forced = [k for k, sel in enumerate(selections) if not sel]
    target_unchanged = round(balance.unchanged * n)
    candidates = [k for k, sel in enumerate(selections) if sel]
    extra = max(0, min(len(candidates), target_unchanged - len(forced)))
    keep_unchanged = set(forced) | set(rng.choice(candidates, size=extra, replace=False).tolist() if extra else [])

    slots = [(k, obj) for k, sel in enumerate(selections) if k not in keep_unchanged for obj in sel]
    shares = balance.op_shares()
    commands = list(shares)
    counts = _quota(len(slots), [shares[c] for c in commands])
    labels = [c for c, cnt in zip(commands, counts) for _ in range(cnt)]
    labels = [labels[i] for i in rng.permutation(len(labels))]

    ops_by_image: dict[int, list[Stage2Operation]] = {}
    for (k, obj_idx), cmd in zip(slots, labels):
        o = images[k].objects[obj_idx]
        edit_kind = substitution = None
        if cmd is EditCommand.EDIT:
            if rng.random() < color_change_fraction:
                edit_kind = "color_change"
            else:
                edit_kind, substitution = "substitution", ""
        side = "original" if cmd is EditCommand.ADD else "edited"
        ops_by_image.setdefault(k, []).append(
            Stage2Operation(cmd, o.class_name, o.bbox, o.mask_ref, side, edit_kind, substitution)
        )
    records = tuple(
        Stage2Record(im.image_id, tuple(ops_by_image.get(k, ())), apply_probability)
        for k, im in enumerate(images)
    )
    return Stage2Manifest(records, seed, balance, tuple(warnings))


def plan_augmentation(manifest: Stage2Manifest, apply_probability: float = 0.5, seed: int | None = None) -> Stage2Manifest:
    """Decide per record whether the pair is JPEG re-encoded, and at which quality."""
    if not 0.0 <= apply_probability <= 1.0:
        raise ValueError("apply_probability must lie in [0, 1]")
    rng = np.random.default_rng([manifest.seed if seed is None else seed, 1])
    out = []
    for r in manifest.records:
        quality = None
        if rng.random() < apply_probability:
            quality = JPEG_QUALITIES[int(rng.integers(len(JPEG_QUALITIES)))]
        out.append(replace(r, apply_probability=apply_probability, jpeg_quality=quality))
    return replace(manifest, records=tuple(out))


def validate_stage2_manifest(
    manifest: Stage2Manifest,
    corpus: Sequence[AnnotatedImage],
    *,
    min_area_fraction: float = MIN_AREA_FRACTION,
    max_overlap: float = MAX_MASK_OVERLAP,
    max_objects: int = MAX_OBJECTS,
    mask_loader: MaskLoader | None = None,
) -> list[str]:
    """Post-hoc check of every record; returns human-readable violations."""
    by_id = {im.image_id: im for im in corpus}
    problems = []
    for r in manifest.records:
        im = by_id.get(r.image_id)
        if im is None:
            problems.append(f"{r.image_id}: not in corpus")
            continue
        if len(r.operations) > max_objects:
            problems.append(f"{r.image_id}: {len(r.operations)} operations > {max_objects}")
        geom = _Geometry(im, mask_loader)
        idx = []
        for o in r.operations:
            matches = [
                k for k, obj in enumerate(im.objects) if obj.bbox == o.bbox and obj.class_name == o.class_name
            ]
            if not matches:
                problems.append(f"{r.image_id}: operation target {o.class_name} not annotated")
                continue
            k = matches[0]
            idx.append(k)
            if geom.area_fraction(k) < min_area_fraction:
                problems.append(f"{r.image_id}: {o.class_name} covers {geom.area_fraction(k):.4f} < {min_area_fraction}")
            want_side = "original" if o.op is EditCommand.ADD else "edited"
            if o.which_side != want_side:
                problems.append(f"{r.image_id}: {o.op.value} on side {o.which_side}")
            if (o.op is EditCommand.EDIT) != (o.edit_kind is not None):
                problems.append(f"{r.image_id}: edit_kind {o.edit_kind!r} on {o.op.value}")
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                ov = geom.overlap(idx[a], idx[b])
                if ov > max_overlap:
                    problems.append(f"{r.image_id}: overlap {ov:.4f} > {max_overlap}")
    return problems


# --- file formats ----------------------------------------------------------------


def load_annotations(
    path: str | Path, embeddings: str | Path | None = None, normalize: bool = False
) -> list[AnnotatedImage]:
    """Read AnnotatedImage JSONL; embeddings inline or from a ``.npy``/``.npz`` sidecar.

    A ``.npy`` sidecar is an (N, d) array aligned with the JSONL lines; a
    ``.npz`` sidecar holds ``ids`` and ``embeddings`` arrays.
    """
    path = Path(path)
    rows: list[dict[str, Any]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if not isinstance(d, dict):
                    raise ValueError("expected a JSON object")
                rows.append((lineno, d))  # type: ignore[arg-type]
            except ValueError as exc:
                raise SchemaError(path, lineno, f"invalid JSON: {exc}") from None
    side: dict[str, np.ndarray] = {}
    if embeddings is not None:
        epath = Path(embeddings)
        if epath.suffix == ".npz":
            with np.load(epath) as z:
                side = {str(i): np.asarray(v, dtype=np.float64) for i, v in zip(z["ids"], z["embeddings"])}
        else:
            arr = np.load(epath)
            if len(arr) != len(rows):
                raise SchemaError(epath, None, f"{len(arr)} embeddings for {len(rows)} annotations")
            side = {str(d["image_id"]): np.asarray(v, dtype=np.float64) for (_, d), v in zip(rows, arr)}  # type: ignore[misc]
    out = []
    for lineno, d in rows:  # type: ignore[misc]
        try:
            if side and str(d["image_id"]) in side:
                d = {**d, "embedding": side[str(d["image_id"])]}
            out.append(AnnotatedImage.from_json(d, normalize=normalize))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(path, lineno, f"bad annotation: {exc}") from None
    return out


def dumps_pairs(pairs: Iterable[Stage1Pair]) -> str:
    return "".join(json.dumps(p.to_json(), sort_keys=True, separators=(",", ":")) + "\n" for p in pairs)


def png_mask_loader(root: str | Path) -> MaskLoader:
    """Mask loader reading binary PNG masks relative to ``root``; None if missing."""
    from PIL import Image as PILImage

    root = Path(root)
    cache: dict[str, np.ndarray | None] = {}

    def load(ref: str) -> np.ndarray | None:
        if ref not in cache:
            p = root / ref
            if p.is_file():
                with PILImage.open(p) as im:
                    cache[ref] = np.asarray(im.convert("L")) > 127
            else:
                cache[ref] = None
        return cache[ref]

    return load
