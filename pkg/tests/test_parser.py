import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from editeval.core import Difference, EditCommand, NormalizedBBox
from editeval.parser import (
    ParseReport,
    TokenLogprob,
    attach_confidence,
    command_distribution,
    parse_differences,
    serialize_differences,
)

ADD, REMOVE, EDIT = EditCommand.ADD, EditCommand.REMOVE, EditCommand.EDIT


def reasons(text):
    return [m.reason for m in parse_differences(text).malformed_lines]


class TestParse:
    def test_bracket_line(self):
        r = parse_differences("ADD: watermelon, [0.10, 0.20, 0.55, 0.60]")
        assert r.differences == (
            Difference(ADD, "watermelon", NormalizedBBox(0.10, 0.20, 0.55, 0.60), 1.0),
        )
        assert r.malformed_lines == ()

    def test_empty(self):
        r = parse_differences("")
        assert r.differences == () and r.malformed_lines == ()

    def test_unknown_command(self):
        assert reasons("PAINT: sky, [0,0,1,1]") == ["unknown-command"]

    @pytest.mark.parametrize(
        "line",
        [
            "remove: giraffe, (0.2, 0.1, 0.8, 0.9)",
            "REMOVE: giraffe, ([0.2, 0.1, 0.8, 0.9])",
            '- "REMOVE: giraffe, [0.2, 0.1, 0.8, 0.9]"',
            "1. Remove: giraffe , [0.2,0.1,0.8,0.9].",
        ],
    )
    def test_accepted_variants(self, line):
        r = parse_differences(line)
        assert len(r.differences) == 1, r.malformed_lines
        d = r.differences[0]
        assert d.command is REMOVE and d.subject == "giraffe"
        assert d.bbox.as_tuple() == (0.2, 0.1, 0.8, 0.9)

    def test_subject_with_commas_and_brackets(self):
        d = parse_differences("EDIT: a red, shiny car (toy) [sic], [0.1, 0.1, 0.5, 0.5]").differences[0]
        assert d.subject == "a red, shiny car (toy) [sic]"

    def test_reasons(self):
        assert reasons("ADD: cat, [0.1, 0.2, 0.3]") == ["bad-coordinates"]
        assert reasons("ADD: cat") == ["bad-coordinates"]
        assert reasons("ADD: cat, [a, b, c, d]") == ["bad-coordinates"]
        assert reasons("ADD: cat, [0.1, 0.2, 1.5, 0.3]") == ["out-of-range"]
        assert reasons("ADD: cat, [0.5, 0.2, 0.5, 0.3]") == ["degenerate-box"]
        assert reasons("ADD: cat, [0.6, 0.2, 0.5, 0.3]") == ["degenerate-box"]
        assert reasons("ADD: , [0.1, 0.2, 0.5, 0.3]") == ["empty-subject"]
        assert reasons("just some words") == ["unknown-command"]
        assert reasons("ADD: cat, [nan, 0.2, 0.5, 0.3]") == ["bad-coordinates"]

    def test_clamps_small_overshoot(self):
        d = parse_differences("ADD: cat, [-0.004, 0.0, 1.0000001, 1.009]").differences[0]
        assert d.bbox.as_tuple() == (0.0, 0.0, 1.0, 1.0)
        assert reasons("ADD: cat, [-0.02, 0.0, 0.5, 0.5]") == ["out-of-range"]

    def test_mixed_lines_preserve_order(self):
        text = "ADD: a, [0,0,.5,.5]\n\nbogus\nREMOVE: b, [.5,.5,1,1]\n  \n"
        r = parse_differences(text)
        assert [d.subject for d in r.differences] == ["a", "b"]
        assert len(r.malformed_lines) == 1
        assert r.command_offsets == (0, text.index("REMOVE"))

    @given(st.text(max_size=200))
    def test_total(self, s):
        r = parse_differences(s)
        candidates = [ln for ln in s.splitlines() if ln.strip()]
        assert len(r.differences) + len(r.malformed_lines) == len(candidates)

    def test_json_roundtrip(self):
        r = parse_differences("ADD: cat, [0,0,.5,.5]\nnope")
        assert ParseReport.from_json(r.to_json()) == r


def random_diffs():
    def box(v):
        x0, y0, w, h = v
        return NormalizedBBox(x0, y0, min(1.0, x0 + w), min(1.0, y0 + h))

    coord = st.floats(0, 0.97)
    side = st.floats(0.02, 1.0)
    subject = st.from_regex(r"[A-Za-z][A-Za-z0-9 \-]{0,20}[A-Za-z0-9]", fullmatch=True)
    diff = st.builds(
        Difference,
        st.sampled_from(list(EditCommand)),
        subject,
        st.tuples(coord, coord, side, side).map(box),
        st.just(1.0),
    )
    return st.lists(diff, max_size=6)


class TestSerialize:
    def test_canonical(self):
        d = Difference(REMOVE, "giraffe", NormalizedBBox(0.3, 0.1, 0.9, 0.95))
        assert serialize_differences([d]) == "REMOVE: giraffe, [0.30, 0.10, 0.90, 0.95]"

    def test_empty(self):
        assert serialize_differences([]) == ""

    @given(random_diffs())
    def test_roundtrip(self, diffs):
        r = parse_differences(serialize_differences(diffs))
        assert r.malformed_lines == ()
        assert len(r.differences) == len(diffs)
        for a, b in zip(diffs, r.differences):
            assert a.command == b.command
            assert " ".join(a.subject.split()) == b.subject
            for x, y in zip(a.bbox.as_tuple(), b.bbox.as_tuple()):
                assert abs(x - y) <= 0.005 + 1e-12


def toks(*pairs):
    return [TokenLogprob(t, lp, tuple(alts)) for t, lp, alts in pairs]


class TestConfidence:
    def one(self, alts, chosen="ADD"):
        text = f"{chosen}: cat, [0, 0, 0.5, 0.5]"
        first = {"ADD": "ADD", "EDIT": "EDIT", "REMOVE": "REM"}[chosen]
        stream = toks((first, 0.0, alts), (text[len(first):], 0.0, []))
        return attach_confidence(parse_differences(text), stream)

    def test_already_normalized(self):
        r = self.one([("ADD", math.log(0.7)), ("EDIT", math.log(0.2)), ("REM", math.log(0.1))])
        assert r.differences[0].confidence == pytest.approx(0.7, abs=1e-12)
        assert r.unscored == ()

    def test_missing_command_renormalized(self):
        r = self.one([("ADD", math.log(0.5)), ("EDIT", math.log(0.3)), ("The", math.log(0.1))])
        assert r.differences[0].confidence == pytest.approx(0.625, abs=1e-12)

    def test_empty_alternatives_fallback(self):
        r = self.one([])
        assert r.differences[0].confidence == 1.0
        assert r.unscored == (0,)

    def test_chosen_absent_fallback(self):
        r = self.one([("EDIT", math.log(0.6))], chosen="REMOVE")
        assert r.differences[0].confidence == 1.0 and r.unscored == (0,)

    def test_misaligned_stream_flags(self):
        text = "ADD: cat, [0, 0, 0.5, 0.5]"
        r = attach_confidence(parse_differences(text), toks(("XYZ", 0.0, [("ADD", -0.1)])))
        assert r.unscored == (0,) and r.differences[0].confidence == 1.0

    def test_second_line_leading_whitespace_token(self):
        text = "ADD: a, [0,0,.5,.5]\nREMOVE: b, [.5,.5,1,1]"
        cut = text.index("\nREMOVE")
        stream = toks(
            ("ADD", 0.0, [("ADD", math.log(0.9)), ("REM", math.log(0.1))]),
            (text[3:cut], 0.0, []),
            ("\nREM", math.log(0.4), [("\nREM", math.log(0.4)), ("\nADD", math.log(0.4)), ("\nEDIT", math.log(0.2))]),
            ("OVE" + text[cut + 4 + 3 :], 0.0, []),
        )
        assert "".join(t.token_text for t in stream) == text
        r = attach_confidence(parse_differences(text), stream)
        assert [d.confidence for d in r.differences] == pytest.approx([0.9, 0.4])

    def test_variant_tokens_pool_mass(self):
        dist = command_distribution([("ADD", math.log(0.3)), (" ADD", math.log(0.2)), ("Add", math.log(0.1))])
        assert dist[ADD] == pytest.approx(0.6)

    @given(st.lists(st.floats(0.001, 1.0), min_size=3, max_size=3), st.sampled_from(["ADD", "EDIT", "REMOVE"]))
    def test_three_way_sums_to_one(self, ps, chosen):
        alts = [("ADD", math.log(ps[0])), ("EDIT", math.log(ps[1])), ("REM", math.log(ps[2]))]
        total = 0.0
        for c in ("ADD", "EDIT", "REMOVE"):
            r = self.one(alts, chosen=c)
            conf = r.differences[0].confidence
            assert 0.0 <= conf <= 1.0
            total += conf
        assert total == pytest.approx(1.0, abs=1e-9)
