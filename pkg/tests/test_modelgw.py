import json
import math
import threading

import numpy as np
import pytest

from editeval.core import Difference, EditCommand, Image, NormalizedBBox
from editeval.modelgw import (
    CallableTransport,
    ChatRequest,
    ChatResponse,
    Gateway,
    GatewayConfig,
    GatewayError,
    HttpTransport,
    ImagePart,
    MockBackend,
    MockInferenceServer,
    ResponseCache,
    ScriptedDetection,
    TextPart,
    cache_key,
    image_key,
    parse_verdict,
)
from editeval.modelgw import prompts
from editeval.modelgw.wire import image_parts, text_parts
from editeval.parser import serialize_difference
from helpers import write_case
from oracles import outline_pixels


def gateway_for(backend, root, cache=None, **cfg):
    t = CallableTransport(backend.handle)
    return Gateway(t, t, GatewayConfig(**cfg), cache=cache, image_root=root, sleep=lambda s: None)


@pytest.fixture
def case(tmp_path):
    return write_case(tmp_path, "c1", prompt="remove the giraffe")


def edited_key(root, case):
    return image_key(Image.load(root / case.edited_image))


class TestRequestShape:
    def test_payload_layout(self):
        img = Image.blank(4, 3, (1, 2, 3))
        req = ChatRequest("sys", (TextPart("hi"), ImagePart.of(img)), want_logprobs=True, top_k_alternatives=7)
        body = req.payload("m")
        assert body["temperature"] == 0.0 and body["logprobs"] is True and body["top_logprobs"] == 7
        assert body["messages"][0] == {"role": "system", "content": "sys"}
        parts = body["messages"][1]["content"]
        assert parts[0] == {"type": "text", "text": "hi"}
        assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")
        assert Image.decode(image_parts(body)[0]) == img

    def test_validation(self):
        img = ImagePart.of(Image.blank(2, 2))
        with pytest.raises(ValueError, match="temperature"):
            ChatRequest("s", (), temperature=-0.1)
        with pytest.raises(ValueError, match="limit"):
            ChatRequest("s", (img, img, img))
        with pytest.raises(ValueError, match="two images"):
            ChatRequest("s", (), max_images=1)

    def test_response_without_logprobs(self):
        r = ChatResponse.from_payload({"choices": [{"message": {"content": "x"}}]})
        assert r.text == "x" and r.tokens == ()

    def test_misaligned_tokens_dropped(self):
        body = {
            "choices": [
                {"message": {"content": "ADD"}, "logprobs": {"content": [{"token": "AD", "logprob": 0, "top_logprobs": []}]}}
            ]
        }
        assert ChatResponse.from_payload(body).tokens == ()


class TestDetect:
    def test_scripted_remove(self, tmp_path, case):
        backend = MockBackend({edited_key(tmp_path, case): "REMOVE: giraffe, [0.2, 0.1, 0.8, 0.9]"})
        report = gateway_for(backend, tmp_path).detect(case)
        [d] = report.differences
        assert (d.command, d.subject, d.bbox.as_tuple()) == (EditCommand.REMOVE, "giraffe", (0.2, 0.1, 0.8, 0.9))
        # REM + OVE tokenization, mock gives 0.9/0.05/0.05 before the distractor
        assert d.confidence == pytest.approx(0.9)
        assert report.unscored == ()

    def test_empty_completion(self, tmp_path, case):
        report = gateway_for(MockBackend(), tmp_path).detect(case)
        assert report.differences == () and report.malformed_lines == ()

    def test_good_and_malformed(self, tmp_path, case):
        text = "ADD: cat, [0.1, 0.1, 0.3, 0.3]\nJUMP: dog, [0.1, 0.1, 0.2, 0.2]"
        report = gateway_for(MockBackend({edited_key(tmp_path, case): text}), tmp_path).detect(case)
        assert len(report.differences) == 1 and len(report.malformed_lines) == 1

    def test_scripted_confidence(self, tmp_path, case):
        script = ScriptedDetection(
            "EDIT: rose, [0.1, 0.1, 0.5, 0.5]\nADD: vase, [0.5, 0.5, 0.9, 0.9]",
            ({"ADD": 0.2, "REMOVE": 0.2, "EDIT": 0.6}, {"ADD": 0.3, "REMOVE": 0.3, "EDIT": 0.4}),
        )
        report = gateway_for(MockBackend({edited_key(tmp_path, case): script}), tmp_path).detect(case)
        assert [d.confidence for d in report.differences] == pytest.approx([0.6, 0.3])

    def test_prompt_never_sent(self, tmp_path, case):
        backend = MockBackend()
        gateway_for(backend, tmp_path).detect(case)
        [(route, payload)] = backend.requests
        assert case.prompt not in json.dumps(payload)
        assert text_parts(payload) == [prompts.DETECTION_SYSTEM_PROMPT]
        orig, edit = [Image.decode(b) for b in image_parts(payload)]
        assert orig == Image.load(tmp_path / case.original_image)
        assert edit == Image.load(tmp_path / case.edited_image)

    def test_failure_becomes_case_record(self, tmp_path, case):
        backend = MockBackend()
        backend.fail_next(10)
        sleeps = []
        g = Gateway(CallableTransport(backend.handle), config=GatewayConfig(), image_root=tmp_path, sleep=sleeps.append)
        [res] = g.detect_many([case])
        assert res.report is None and "4 attempt" in res.error
        assert sleeps == [1.0, 4.0, 16.0]
        assert backend.request_count == 4

    def test_transient_failure_retried(self, tmp_path, case):
        backend = MockBackend()
        backend.fail_next(2)
        g = gateway_for(backend, tmp_path)
        assert g.detect(case).differences == ()
        assert g.network_calls == 3

    def test_client_error_not_retried(self, tmp_path, case):
        backend = MockBackend()
        backend.fail_next(1, status=400)
        g = gateway_for(backend, tmp_path)
        with pytest.raises(GatewayError, match="1 attempt"):
            g.detect(case)

    def test_missing_image_is_case_error(self, tmp_path, case):
        (tmp_path / case.edited_image).unlink()
        [res] = gateway_for(MockBackend(), tmp_path).detect_many([case])
        assert res.error and res.report is None

    def test_batch_sorted_and_bounded(self, tmp_path):
        cases = [write_case(tmp_path, f"k{i}", seed=i) for i in (3, 1, 2, 0)]
        backend = MockBackend()
        res = gateway_for(backend, tmp_path, concurrency=3).detect_many(cases)
        assert [r.case_id for r in res] == ["k0", "k1", "k2", "k3"]


class TestOverlays:
    @pytest.mark.parametrize(
        "cmd,color,side",
        [(EditCommand.ADD, (255, 0, 0), 1), (EditCommand.EDIT, (0, 255, 0), 0), (EditCommand.REMOVE, (0, 0, 255), 0)],
    )
    def test_color_and_side(self, tmp_path, case, cmd, color, side):
        g = gateway_for(MockBackend(), tmp_path)
        box = NormalizedBBox(0.1, 0.2, 0.7, 0.9)
        inputs = g.case_images(case)
        out = g.prepare_coherence_images(case, Difference(cmd, "thing", box, 1.0))
        assert out[1 - side] == inputs[1 - side]
        changed = np.argwhere((out[side].pixels != inputs[side].pixels).any(axis=2))
        r0, r1, c0, c1 = box.pixel_span(case.width, case.height)
        expected = outline_pixels(case.width, case.height, r0, r1, c0, c1, 4)
        assert {tuple(p) for p in changed} <= expected
        for r, c in expected:
            assert tuple(out[side].pixels[r, c]) == color


class TestCoherence:
    def test_parse_verdict(self):
        assert parse_verdict('Reasoning: the rose is blue.\nDecision: "YES"') == parse_verdict(
            'Reasoning: the rose is blue.\ndecision: yes'
        )
        v = parse_verdict('- Reasoning: looks wrong\n  spans lines\n- Decision: "no"')
        assert v.decision is False and v.rationale == "looks wrong\n  spans lines" and not v.flagged_unparseable
        v = parse_verdict("I think it is fine.")
        assert v.decision is False and v.flagged_unparseable and v.rationale == "I think it is fine."
        assert parse_verdict("Decision: maybe").flagged_unparseable
        assert parse_verdict("Decision: YESTERDAY").flagged_unparseable

    def test_scripted_yes(self, tmp_path, case):
        d = Difference(EditCommand.EDIT, "rose", NormalizedBBox(0.1, 0.1, 0.5, 0.5), 1.0)
        change = serialize_difference(d)
        backend = MockBackend(coherence={(case.prompt, change): 'Reasoning: cyan is blue.\nDecision: "YES"'})
        v = gateway_for(backend, tmp_path).assess_coherence(case, d)
        assert v.decision is True and v.rationale == "cyan is blue."
        [(_, payload)] = backend.requests
        user = text_parts(payload)[1]
        assert change in user and "EDIT: rose, [0.10, 0.10, 0.50, 0.50]" in user
        assert case.prompt in user
        assert text_parts(payload)[0] == prompts.COHERENCE_SYSTEM_PROMPT

    def test_unparseable_flagged(self, tmp_path, case):
        d = Difference(EditCommand.ADD, "cat", NormalizedBBox(0.1, 0.1, 0.5, 0.5), 1.0)
        backend = MockBackend(default_coherence="no idea")
        v = gateway_for(backend, tmp_path).assess_coherence(case, d)
        assert v.flagged_unparseable and v.decision is False

    def test_braces_in_prompt_survive(self):
        text = prompts.fill_coherence("write {SUBSTITUTE_CHANGE} on the wall", "ADD: text, [0.10, 0.10, 0.20, 0.20]")
        assert "1. The original edit prompt is: write {SUBSTITUTE_CHANGE} on the wall" in text


class TestCaptions:
    def test_caption_and_compose(self, tmp_path, case):
        g_img = Image.load(tmp_path / case.original_image)
        backend = MockBackend(
            captions={image_key(g_img): "a giraffe in a field"},
            compositions={("a giraffe in a field", "remove the giraffe"): "an empty field"},
        )
        g = gateway_for(backend, tmp_path)
        cap = g.caption(g_img)
        assert cap == "a giraffe in a field"
        assert g.compose_target_caption(cap, case.prompt) == "an empty field"

    def test_empty_prompt(self, tmp_path):
        g = gateway_for(MockBackend(), tmp_path)
        with pytest.raises(ValueError, match="empty prompt"):
            g.compose_target_caption("a cat", "   ")


class TestEmbeddings:
    def test_unit_and_deterministic(self, tmp_path):
        g = gateway_for(MockBackend(), tmp_path, cache=ResponseCache(tmp_path / "cache"))
        img = Image.blank(8, 8, (10, 200, 30))
        v1, v2 = g.embed_image(img), g.embed_image(img)
        assert abs(np.linalg.norm(v1) - 1) < 1e-6 and np.array_equal(v1, v2)
        assert float(v1 @ v1) == pytest.approx(1.0)
        t = g.embed_text("a cat")
        assert abs(np.linalg.norm(t) - 1) < 1e-6
        assert g.cache_hits == 1

    def test_dimension_mismatch(self, tmp_path):
        dims = iter([3, 4])

        def handler(route, payload):
            return {"data": [{"embedding": [1.0] * next(dims)}]}

        g = Gateway(None, CallableTransport(handler))
        g.embed_text("a")
        with pytest.raises(GatewayError, match="dimension mismatch"):
            g.embed_text("b")


class TestCache:
    def test_key_is_content_hash(self):
        a = cache_key("detect", "m", {"x": 1, "y": [1, 2]})
        assert a == cache_key("detect", "m", {"y": [1, 2], "x": 1})
        assert a != cache_key("detect", "m2", {"x": 1, "y": [1, 2]})
        assert a != cache_key("coherence", "m", {"x": 1, "y": [1, 2]})

    def test_entry_holds_request_and_response(self, tmp_path, case):
        cache = ResponseCache(tmp_path / "cache")
        g = gateway_for(MockBackend(), tmp_path, cache=cache)
        g.detect(case)
        [call] = g.calls
        entry = json.loads(cache.path(call.key).read_text())
        assert set(entry) >= {"request", "response", "key", "latency_ms"}
        assert entry["request"]["messages"][0]["content"] == prompts.DETECTION_SYSTEM_PROMPT
        assert not list((tmp_path / "cache").glob("*/.tmp-*"))

    def test_warm_run_zero_calls_identical_manifest(self, tmp_path):
        cases = [write_case(tmp_path, f"w{i}", seed=i) for i in range(3)]
        cache = ResponseCache(tmp_path / "cache")
        b1 = MockBackend(default_detection="ADD: cat, [0.1, 0.1, 0.4, 0.4]")
        g1 = gateway_for(b1, tmp_path, cache=cache)
        r1 = g1.detect_many(cases)
        b2 = MockBackend()  # would answer differently if asked
        g2 = gateway_for(b2, tmp_path, cache=cache)
        r2 = g2.detect_many(cases)
        assert b2.request_count == 0 and g2.network_calls == 0
        assert [r.to_json() for r in r1] == [r.to_json() for r in r2]
        assert g1.calls_jsonl() == g2.calls_jsonl()

    def test_corrupt_entry_is_a_miss(self, tmp_path, case):
        cache = ResponseCache(tmp_path / "cache")
        g = gateway_for(MockBackend(), tmp_path, cache=cache)
        g.detect(case)
        cache.path(g.calls[0].key).write_text("{trunc")
        g2 = gateway_for(MockBackend(), tmp_path, cache=cache)
        g2.detect(case)
        assert g2.network_calls == 1

    def test_concurrent_puts(self, tmp_path):
        cache = ResponseCache(tmp_path / "cache")

        def put(i):
            cache.put("ab" + "0" * 62, "e", "m", {"i": i}, {"r": i}, 1.0)

        threads = [threading.Thread(target=put, args=(i,)) for i in range(16)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert cache.get("ab" + "0" * 62) is not None


class TestWireCapture:
    """Assertions on traffic captured by the HTTP mock server."""

    def test_over_http(self, tmp_path, case):
        diffs_text = "ADD: cat, [0.1, 0.1, 0.4, 0.4]\nEDIT: rose, [0.5, 0.5, 0.9, 0.9]\nREMOVE: cup, [0.0, 0.6, 0.3, 1.0]"
        backend = MockBackend({edited_key(tmp_path, case): diffs_text})
        with MockInferenceServer(backend) as server:
            t = HttpTransport(server.url, api_key="secret")
            g = Gateway(t, t, GatewayConfig(), image_root=tmp_path)
            report = g.detect(case)
            assert len(report.differences) == 3
            verdicts = [g.assess_coherence(case, d) for d in report.differences]
            t.close()
        assert all(v.flagged_unparseable is False for v in verdicts)
        det = [p for r, p in backend.requests if text_parts(p)[0] == prompts.DETECTION_SYSTEM_PROMPT]
        coh = [p for r, p in backend.requests if text_parts(p)[0] == prompts.COHERENCE_SYSTEM_PROMPT]
        assert len(det) == 1 and len(coh) == 3
        assert case.prompt not in json.dumps(det[0])
        orig = Image.load(tmp_path / case.original_image)
        edit = Image.load(tmp_path / case.edited_image)
        expect = {"ADD": ((255, 0, 0), 1), "EDIT": ((0, 255, 0), 0), "REMOVE": ((0, 0, 255), 0)}
        for d, payload in zip(report.differences, coh):
            assert serialize_difference(d) in text_parts(payload)[1]
            sent = [Image.decode(b) for b in image_parts(payload)]
            color, side = expect[d.command.value]
            assert sent[1 - side] == (orig, edit)[1 - side]
            r0, r1, c0, c1 = d.bbox.pixel_span(case.width, case.height)
            assert tuple(sent[side].pixels[r0, c0]) == color
            assert tuple(sent[side].pixels[r1 - 1, c1 - 1]) == color

    def test_unreachable_endpoint(self, tmp_path, case):
        t = HttpTransport("http://127.0.0.1:9/v1", timeout=1.0)
        g = Gateway(t, config=GatewayConfig(retries=1), image_root=tmp_path, sleep=lambda s: None)
        [res] = g.detect_many([case])
        assert res.error and "2 attempt" in res.error

    def test_http_status_mapping(self, tmp_path, case):
        backend = MockBackend()
        backend.fail_next(1, status=429)
        with MockInferenceServer(backend) as server:
            g = Gateway(HttpTransport(server.url), image_root=tmp_path, sleep=lambda s: None)
            g.detect(case)
        assert g.network_calls == 2


def test_mock_tokens_concatenate_and_normalize():
    from editeval.modelgw.mock import tokenize

    text = "- REMOVE: dog, [0.1, 0.1, 0.2, 0.2]\n  ADD: cat, [0.3, 0.3, 0.5, 0.5]"
    toks = tokenize(text)
    assert "".join(t["token"] for t in toks) == text
    cmd = [t for t in toks if t["token"] in ("REM", "ADD")]
    for t in cmd:
        assert sum(math.exp(a["logprob"]) for a in t["top_logprobs"]) == pytest.approx(1.0)
