import numpy as np
import pytest

from editeval.core import CoherenceVerdict, Difference, EditCase, EditCommand, GroundTruthDifference, NormalizedBBox
from editeval.detmetrics import (
    CLASS_AGNOSTIC,
    CLASS_AWARE,
    IOU_THRESHOLDS,
    average_precision,
    coherence_accuracy,
    evaluate_coherence_ap,
    evaluate_detection,
    match_detections,
)
from helpers import agnostic_view, coherence_view, random_detection_fixture, report_matches
from oracles import brute_force_ap

ADD, REMOVE, EDIT = EditCommand.ADD, EditCommand.REMOVE, EditCommand.EDIT
B = NormalizedBBox


def gt(cmd, box, coherent=True):
    return GroundTruthDifference(cmd, "obj", B(*box), coherent)


def pred(cmd, box, conf=1.0):
    return Difference(cmd, "obj", B(*box), conf)


def case(gts, cid="c0", w=200, h=200):
    return EditCase(cid, "o.png", "e.png", "p", w, h, tuple(gts))


class TestMatching:
    def test_single_tp(self):
        m = match_detections([pred(ADD, (0, 0, 0.5, 0.5))], [gt(ADD, (0, 0, 0.5, 0.45))], 0.5, False)
        assert m.tp.tolist() == [[True]] and m.gt_matched.tolist() == [[True]]

    def test_class_mismatch(self):
        m = match_detections([pred(REMOVE, (0, 0, 0.5, 0.5))], [gt(ADD, (0, 0, 0.5, 0.5))], 0.5, True)
        assert m.tp.tolist() == [[False]] and m.gt_matched.tolist() == [[False]]

    def test_higher_confidence_wins(self):
        g = gt(ADD, (0, 0, 1, 1))
        p1 = pred(ADD, (0, 0, 0.6, 1), 0.9)  # IoU 0.6
        p2 = pred(ADD, (0, 0, 0.8, 1), 0.8)  # IoU 0.8
        m = match_detections([p2, p1], [g], 0.5, False)
        # order is by confidence: p1 first
        assert m.order.tolist() == [1, 0]
        assert m.tp.tolist() == [[True, False]]

    def test_greedy_matches_brute_force_assignment_order(self):
        # brute force over both processing orders: only confidence order is the protocol's
        g = gt(ADD, (0, 0, 1, 1))
        preds = [pred(ADD, (0, 0, 0.6, 1), 0.9), pred(ADD, (0, 0, 0.8, 1), 0.8)]
        m = match_detections(preds, [g], 0.5, False)
        winner = preds[int(m.order[np.argmax(m.tp[0])])]
        assert winner.confidence == max(p.confidence for p in preds)

    def test_duplicates_one_tp(self):
        g = gt(ADD, (0.1, 0.1, 0.9, 0.9))
        preds = [pred(ADD, (0.1, 0.1, 0.9, 0.9), c) for c in (0.9, 0.8, 0.7)]
        m = match_detections(preds, [g], IOU_THRESHOLDS, False)
        assert (m.tp.sum(axis=1) == 1).all()

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            match_detections([], [], 0.0, False)


class TestAveragePrecision:
    def test_perfect(self):
        m = match_detections([pred(ADD, (0, 0, 0.5, 0.5))], [gt(ADD, (0, 0, 0.5, 0.5))], IOU_THRESHOLDS, False)
        assert average_precision(m, 1) == 1.0

    def test_no_predictions(self):
        m = match_detections([], [gt(ADD, (0, 0, 0.5, 0.5))], IOU_THRESHOLDS, False)
        assert average_precision(m, 1) == 0.0

    def test_iou_point_six_gives_point_three(self):
        # thresholds 0.50, 0.55, 0.60 pass; 7 others fail
        m = match_detections([pred(ADD, (0, 0, 0.6, 1))], [gt(ADD, (0, 0, 1, 1))], IOU_THRESHOLDS, False)
        assert average_precision(m, 1) == pytest.approx(0.3, abs=1e-12)

    def test_predictions_without_gt(self):
        m = match_detections([pred(ADD, (0, 0, 0.6, 1))], [], IOU_THRESHOLDS, False)
        assert average_precision(m, 0) == 0.0


class TestEvaluateDetection:
    def test_identical_predictions(self):
        gts = [gt(ADD, (0, 0, 0.5, 0.5)), gt(REMOVE, (0.5, 0.5, 1, 1)), gt(EDIT, (0.1, 0.6, 0.4, 0.9))]
        rows = [([pred(g.command, g.bbox.as_tuple()) for g in gts], case(gts))]
        for mode in (CLASS_AGNOSTIC, CLASS_AWARE):
            r = evaluate_detection(rows, mode)
            assert r.ap == r.ap50 == r.ap75 == 1.0

    def test_all_wrong_class(self):
        gts = [gt(ADD, (0, 0, 0.5, 0.5))]
        rows = [([pred(REMOVE, (0, 0, 0.5, 0.5))], case(gts))]
        r = evaluate_detection(rows, CLASS_AWARE)
        assert r.per_class["ADD"] == 0.0 and r.per_class["REMOVE"] == 0.0
        assert r.per_class["EDIT"] is None
        assert evaluate_detection(rows, CLASS_AGNOSTIC).ap == 1.0

    def test_missing_gt_is_error(self):
        with pytest.raises(ValueError):
            evaluate_detection([([], EditCase("x", "o", "e", "p", 10, 10))])

    def test_json_mnemonics(self):
        gts = [gt(ADD, (0, 0, 0.5, 0.5))]
        d = evaluate_detection([([pred(ADD, (0, 0, 0.5, 0.5))], case(gts))], CLASS_AWARE).to_json()
        assert {"ap", "ap50", "ap75", "ap_m", "ap_l", "ap_add", "ap_rem", "ap_edit"} <= set(d)

    def test_size_buckets(self):
        # 200x200 image: 0.3x0.3 box = 3600 px (medium); 0.8x0.8 = 25600 px (large)
        small = gt(ADD, (0, 0, 0.3, 0.3))
        big = gt(ADD, (0.2, 0.2, 1, 1))
        r = evaluate_detection([([pred(ADD, (0, 0, 0.3, 0.3), 0.9)], case([small, big]))])
        assert r.ap_m == 1.0
        assert r.ap_l == 0.0

    def test_empty_cases_excluded(self):
        gts = [gt(ADD, (0, 0, 0.5, 0.5))]
        base = [([pred(ADD, (0, 0, 0.5, 0.5))], case(gts))]
        with_empty = base + [([], case([], cid="c1"))]
        assert evaluate_detection(with_empty).ap == evaluate_detection(base).ap

    def test_zero_gt_case_contributes_fp(self):
        gts = [gt(ADD, (0, 0, 0.5, 0.5))]
        base = [([pred(ADD, (0, 0, 0.5, 0.5), 0.5)], case(gts))]
        extra = base + [([pred(ADD, (0, 0, 0.5, 0.5), 0.9)], case([], cid="c1"))]
        assert evaluate_detection(extra).ap < evaluate_detection(base).ap

    @pytest.mark.parametrize("mode", [CLASS_AGNOSTIC, CLASS_AWARE])
    def test_oracle_equivalence(self, rng, mode):
        for _ in range(150):
            rows, oracle = random_detection_fixture(rng)
            if mode == CLASS_AGNOSTIC:
                expected = brute_force_ap(agnostic_view(oracle), ["*"])
            else:
                expected = brute_force_ap(oracle, list(EditCommand))
            ok, key, a, b = report_matches(evaluate_detection(rows, mode), expected)
            assert ok, (key, a, b, oracle)

    def test_monotone_confidence_transform_invariant(self, rng):
        for _ in range(50):
            rows, _ = random_detection_fixture(rng)
            squashed = [
                ([Difference(p.command, p.subject, p.bbox, p.confidence**3 / 2) for p in preds], c)
                for preds, c in rows
            ]
            a, b = evaluate_detection(rows), evaluate_detection(squashed)
            assert a.to_json() == b.to_json()

    def test_low_confidence_fp_never_helps(self, rng):
        for _ in range(50):
            rows, _ = random_detection_fixture(rng, max_cases=1)
            preds, c = rows[0]
            if not c.ground_truth:
                continue
            low = min([p.confidence for p in preds], default=1.0) / 2
            worse = [(preds + [Difference(ADD, "fp", B(0.0, 0.0, 0.011, 0.011), low)], c)]
            a, b = evaluate_detection(rows), evaluate_detection(worse)
            assert b.ap <= a.ap + 1e-12

    def test_adversarial_labels_agnostic_dominates(self, rng):
        # every ground truth becomes ADD and every prediction REMOVE/EDIT
        for _ in range(50):
            rows, _ = random_detection_fixture(rng)
            perm = []
            for preds, c in rows:
                gts = tuple(GroundTruthDifference(ADD, g.subject, g.bbox, g.coherent) for g in c.ground_truth)
                ps = [Difference((REMOVE, EDIT)[i % 2], p.subject, p.bbox, p.confidence) for i, p in enumerate(preds)]
                perm.append((ps, EditCase(c.case_id, "o", "e", "p", c.width, c.height, gts)))
            oracle = [
                {"case_id": c.case_id, "width": c.width, "height": c.height,
                 "preds": [(p.command, p.confidence, p.bbox.as_tuple()) for p in ps],
                 "gts": [(g.command, g.bbox.as_tuple()) for g in c.ground_truth]}
                for ps, c in perm
            ]
            agn = evaluate_detection(perm, CLASS_AGNOSTIC)
            aware = evaluate_detection(perm, CLASS_AWARE)
            assert report_matches(aware, brute_force_ap(oracle, list(EditCommand)))[0]
            if agn.ap is not None and aware.ap is not None:
                assert agn.ap >= aware.ap


class TestCoherence:
    def test_accuracy_all_right(self):
        gts = [gt(ADD, (0, 0, 1, 1), True), gt(ADD, (0, 0, 1, 1), False)]
        assert coherence_accuracy(gts, [CoherenceVerdict(True), CoherenceVerdict(False)]) == 1.0
        assert coherence_accuracy(gts, [False, True]) == 0.0

    def test_accuracy_counting(self):
        labels = [True] * 7 + [False] * 6
        verdicts = list(labels)
        verdicts[0] = not verdicts[0]
        verdicts[-1] = not verdicts[-1]
        gts = [gt(ADD, (0, 0, 1, 1), lab) for lab in labels]
        assert coherence_accuracy(gts, verdicts) == pytest.approx(11 / 13)

    def test_accuracy_length_mismatch(self):
        with pytest.raises(ValueError):
            coherence_accuracy([gt(ADD, (0, 0, 1, 1))], [])

    def test_ap_perfect_and_flipped(self):
        gts = [gt(ADD, (0, 0, 0.5, 0.5), True), gt(REMOVE, (0.5, 0.5, 1, 1), False)]
        preds = [pred(g.command, g.bbox.as_tuple(), 0.9) for g in gts]
        c = case(gts)
        assert evaluate_coherence_ap([(preds, [True, False], c)]).ap == 1.0
        assert evaluate_coherence_ap([(preds, [False, True], c)]).ap == 0.0

    def test_ap_oracle(self, rng):
        for _ in range(150):
            rows, oracle = random_detection_fixture(rng, coherence=True)
            expected = brute_force_ap(coherence_view(oracle), [True, False])
            ok, key, a, b = report_matches(evaluate_coherence_ap(rows), expected)
            assert ok, (key, a, b)
