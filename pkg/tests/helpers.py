"""Random fixture generators shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from editeval.core import CoherenceVerdict, Difference, EditCase, EditCommand, GroundTruthDifference, NormalizedBBox
from conftest import random_box

SIZES = [(100, 100), (160, 120), (320, 240), (640, 480)]
COMMANDS = list(EditCommand)


def jitter(rng, box, scale=0.08):
    x0, y0, x1, y1 = np.array(box) + rng.normal(0, scale, 4) * np.array(
        [box[2] - box[0], box[3] - box[1], box[2] - box[0], box[3] - box[1]]
    )
    x0, y0 = max(0.0, x0), max(0.0, y0)
    x1, y1 = min(1.0, x1), min(1.0, y1)
    if x1 - x0 < 0.01 or y1 - y0 < 0.01:
        return box
    return (float(x0), float(y0), float(x1), float(y1))


def random_detection_fixture(rng, max_cases=3, coherence=False):
    """Returns (engine_rows, oracle_cases). Rows are (preds, case) or (preds, verdicts, case)."""
    rows, oracle = [], []
    for k in range(int(rng.integers(1, max_cases + 1))):
        w, h = SIZES[int(rng.integers(len(SIZES)))]
        n_gt, n_pred = int(rng.integers(0, 6)), int(rng.integers(0, 8))
        gts = []
        for _ in range(n_gt):
            gts.append(
                GroundTruthDifference(
                    COMMANDS[int(rng.integers(3))], "obj", NormalizedBBox(*random_box(rng)), bool(rng.random() < 0.5)
                )
            )
        preds, verdicts = [], []
        for _ in range(n_pred):
            if gts and rng.random() < 0.7:
                src = gts[int(rng.integers(len(gts)))]
                box = jitter(rng, src.bbox.as_tuple())
                cmd = src.command if rng.random() < 0.7 else COMMANDS[int(rng.integers(3))]
                verdict = src.coherent if rng.random() < 0.7 else not src.coherent
            else:
                box, cmd, verdict = random_box(rng), COMMANDS[int(rng.integers(3))], bool(rng.random() < 0.5)
            conf = float(rng.random())
            if rng.random() < 0.25:
                conf = round(conf, 1)  # create ties
            preds.append(Difference(cmd, "obj", NormalizedBBox(*box), conf))
            verdicts.append(CoherenceVerdict(verdict))
        case = EditCase(f"case{k:02d}", "o.png", "e.png", "p", w, h, tuple(gts))
        rows.append((preds, verdicts, case) if coherence else (preds, case))
        oracle.append(
            {
                "case_id": case.case_id,
                "width": w,
                "height": h,
                "preds": [(p.command, p.confidence, p.bbox.as_tuple()) for p in preds],
                "gts": [(g.command, g.bbox.as_tuple()) for g in gts],
                "coh_preds": [(v.decision, p.confidence, p.bbox.as_tuple()) for p, v in zip(preds, verdicts)],
                "coh_gts": [(g.coherent, g.bbox.as_tuple()) for g in gts],
            }
        )
    return rows, oracle


def agnostic_view(oracle):
    return [
        {**c, "preds": [("*", conf, b) for _, conf, b in c["preds"]], "gts": [("*", b) for _, b in c["gts"]]}
        for c in oracle
    ]


def coherence_view(oracle):
    return [{**c, "preds": c["coh_preds"], "gts": c["coh_gts"]} for c in oracle]


def report_matches(report, expected, tol=1e-9):
    for key in ("ap", "ap50", "ap75", "ap_m", "ap_l"):
        a, b = getattr(report, key), expected[key]
        if a is None or b is None:
            if a is not b:
                return False, key, a, b
        elif abs(a - b) > tol:
            return False, key, a, b
    return True, None, None, None


CLASS_POOL = ["dog", "cat", "car", "tree", "person", "cup", "chair", "bird"]


def random_corpus(rng, n_images, dim=8):
    """Synthetic annotated corpus: clustered embeddings, small class vocabulary,
    boxes often shared between images so EDIT clauses trigger. Returns (images, oracle_dicts)."""
    from editeval.datagen import AnnotatedImage, AnnotatedObject

    centers = rng.normal(size=(3, dim))
    anchors = [random_box(rng, 0.03) for _ in range(6)]
    images, oracle = [], []
    for k in range(n_images):
        w, h = SIZES[int(rng.integers(len(SIZES)))]
        emb = centers[int(rng.integers(3))] + rng.normal(0, 0.6, dim)
        emb = emb / np.linalg.norm(emb)
        objs = []
        for _ in range(int(rng.integers(0, 6))):
            cls = CLASS_POOL[int(rng.integers(len(CLASS_POOL)))]
            box = anchors[int(rng.integers(len(anchors)))] if rng.random() < 0.6 else random_box(rng, 0.01)
            if rng.random() < 0.3:
                box = jitter(rng, box, 0.05)
            objs.append((cls, box))
        image_id = f"img{int(rng.integers(10**6)):06d}_{k}"
        images.append(
            AnnotatedImage(
                image_id, w, h, tuple(AnnotatedObject(c, NormalizedBBox(*b)) for c, b in objs), emb
            )
        )
        oracle.append({"id": image_id, "w": w, "h": h, "emb": images[-1].embedding.tolist(), "objs": objs})
    return images, oracle


def stage1_engine(images):
    from editeval.datagen import label_pair, mine_pairs

    by_id = {im.image_id: im for im in images}
    out = []
    for p in mine_pairs(images):
        labels = label_pair(by_id[p.image_a], by_id[p.image_b])
        out.append(
            (p.image_a, p.image_b, p.differing_classes, [(g.command.value, g.subject, g.bbox.as_tuple()) for g in labels])
        )
    return out


def write_case(root, case_id, prompt="make the sky purple", size=(64, 48), seed=0, ground_truth=None, **extra):
    """Write a random original/edited PNG pair under ``root`` and return the EditCase (relative paths)."""
    from pathlib import Path

    from editeval.core import Image

    root = Path(root)
    w, h = size
    r = np.random.default_rng(seed)
    orig = r.integers(0, 256, (h, w, 3), dtype=np.uint8)
    edit = orig.copy()
    edit[h // 4 : h // 2, w // 4 : w // 2] = r.integers(0, 256, 3, dtype=np.uint8)
    (root / "images").mkdir(parents=True, exist_ok=True)
    Image(orig).save(root / "images" / f"{case_id}_orig.png")
    Image(edit).save(root / "images" / f"{case_id}_edit.png")
    return EditCase(
        case_id,
        f"images/{case_id}_orig.png",
        f"images/{case_id}_edit.png",
        prompt,
        w,
        h,
        None if ground_truth is None else tuple(ground_truth),
        extra=dict(extra),
    )
