"""Detection, coherence, captioning and embedding calls with caching and retries."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from ..core import RGB, CoherenceVerdict, Difference, EditCase, EditCommand, Image, draw_box_outline
from ..parser import ParseReport, attach_confidence, parse_differences, serialize_difference
from . import prompts
from .cache import ResponseCache, cache_key
from .wire import (
    CHAT_ROUTE,
    EMBED_ROUTE,
    ChatRequest,
    ChatResponse,
    ImagePart,
    TextPart,
    Transport,
    TransportError,
    embedding_from_payload,
    embedding_payload,
)

log = logging.getLogger(__name__)

OVERLAY_COLORS: dict[EditCommand, RGB] = {
    EditCommand.ADD: (255, 0, 0),
    EditCommand.EDIT: (0, 255, 0),
    EditCommand.REMOVE: (0, 0, 255),
}


class GatewayError(RuntimeError):
    """A call failed after all retries, or returned an unusable response."""


@dataclass(frozen=True)
class GatewayConfig:
    detector_model: str = "detector"
    coherence_model: str = "coherence"
    caption_model: str = "captioner"
    compose_model: str = "composer"
    embed_model: str = "embedder"
    top_k: int = 5
    temperature: float = 0.0
    max_tokens: int = 512
    max_images: int = 2
    overlay_thickness: int = 4
    add_color: RGB = OVERLAY_COLORS[EditCommand.ADD]
    edit_color: RGB = OVERLAY_COLORS[EditCommand.EDIT]
    remove_color: RGB = OVERLAY_COLORS[EditCommand.REMOVE]
    retries: int = 3
    backoff: tuple[float, ...] = (1.0, 4.0, 16.0)
    concurrency: int = 4

    def color(self, command: EditCommand) -> RGB:
        return {
            EditCommand.ADD: self.add_color,
            EditCommand.EDIT: self.edit_color,
            EditCommand.REMOVE: self.remove_color,
        }[command]


@dataclass(frozen=True)
class CallRecord:
    key: str
    endpoint: str
    model: str
    case_id: str
    latency_ms: float
    prompt_tokens: int
    completion_tokens: int

    def to_json(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "endpoint": self.endpoint,
            "model": self.model,
            "case_id": self.case_id,
            "latency_ms": self.latency_ms,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


@dataclass(frozen=True)
class DetectionResult:
    case_id: str
    report: ParseReport | None
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {"case_id": self.case_id, "error": self.error}
        if self.report is not None:
            d.update(self.report.to_json())
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "DetectionResult":
        report = None if d.get("error") else ParseReport.from_json(d)
        return cls(str(d["case_id"]), report, d.get("error"))


@dataclass(frozen=True)
class CoherenceResult:
    case_id: str
    index: int
    difference: Difference
    verdict: CoherenceVerdict | None
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "index": self.index,
            "difference": self.difference.to_json(),
            "verdict": None if self.verdict is None else self.verdict.to_json(),
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CoherenceResult":
        v = d.get("verdict")
        return cls(
            str(d["case_id"]),
            int(d["index"]),
            Difference.from_json(d["difference"]),
            None if v is None else CoherenceVerdict.from_json(v),
            d.get("error"),
        )


_LABEL = r"^[\s\-*#>]*{}\s*\**\s*[:=]"
_DECISION = re.compile(_LABEL.format("decision") + r"[\s\"'*`]*(yes|no)\b", re.I | re.M)
_REASONING = re.compile(
    _LABEL.format("reasoning") + r"(.*?)(?=" + _LABEL.format("decision") + r"|\Z)", re.I | re.M | re.S
)


def parse_verdict(text: str) -> CoherenceVerdict:
    """Read ``Decision: YES|NO`` (case-insensitive, quotes allowed); the last one wins.

    No decision line means the answer is unusable: decision False, flagged.
    """
    decisions = _DECISION.findall(text)
    m = _REASONING.search(text)
    if m:
        rationale = m.group(1).strip()
    else:
        rationale = _DECISION.sub("", text).strip() if decisions else text.strip()
    if not decisions:
        return CoherenceVerdict(False, rationale, flagged_unparseable=True)
    return CoherenceVerdict(decisions[-1].lower() == "yes", rationale)


class Gateway:
    """Inference front-end shared by the pipeline commands.

    ``chat`` and ``embeddings`` are transports (HTTP or in-process). With a
    cache, identical requests are answered from disk and do not touch the
    transport; call records reuse the latency stored with the entry so warm
    and cold runs log identical manifests.
    """

    def __init__(
        self,
        chat: Transport | None,
        embeddings: Transport | None = None,
        config: GatewayConfig | None = None,
        cache: ResponseCache | None = None,
        image_root: str | Path = ".",
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.chat = chat
        self.embeddings = embeddings
        self.config = config or GatewayConfig()
        self.cache = cache
        self.image_root = Path(image_root)
        self.sleep = sleep
        self.network_calls = 0
        self.cache_hits = 0
        self._calls: list[CallRecord] = []
        self._lock = threading.Lock()
        self._images: dict[Path, Image] = {}
        self._dim: int | None = None
        self._inflight: dict[str, threading.Lock] = {}

    # -- plumbing -------------------------------------------------------------

    @property
    def calls(self) -> list[CallRecord]:
        with self._lock:
            return sorted(self._calls, key=lambda c: (c.case_id, c.endpoint, c.key))

    def calls_jsonl(self) -> str:
        return "".join(json.dumps(c.to_json(), sort_keys=True) + "\n" for c in self.calls)

    def _post(
        self,
        endpoint: str,
        transport: Transport | None,
        route: str,
        model: str,
        payload: dict[str, Any],
        case_id: str,
        decode: Callable[[dict[str, Any]], Any],
    ) -> Any:
        key = cache_key(endpoint, model, payload)
        with self._lock:
            key_lock = self._inflight.setdefault(key, threading.Lock())
        # identical concurrent requests wait for the first one and then hit the cache
        with key_lock:
            return self._post_once(key, endpoint, transport, route, model, payload, case_id, decode)

    def _post_once(
        self,
        key: str,
        endpoint: str,
        transport: Transport | None,
        route: str,
        model: str,
        payload: dict[str, Any],
        case_id: str,
        decode: Callable[[dict[str, Any]], Any],
    ) -> Any:
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                try:
                    value = decode(hit.response)
                except TransportError:
                    value = None
                if value is not None:
                    with self._lock:
                        self.cache_hits += 1
                    self._record(key, endpoint, model, case_id, hit.latency_ms, hit.response)
                    return value
        if transport is None:
            raise GatewayError(f"{endpoint}: no endpoint configured")
        last: Exception | None = None
        attempts = 0
        for attempt in range(self.config.retries + 1):
            attempts += 1
            with self._lock:
                self.network_calls += 1
            t0 = time.perf_counter()
            try:
                body = transport.post(route, payload)
                value = decode(body)
            except TransportError as exc:
                last = exc
                if not exc.retryable or attempt == self.config.retries:
                    break
                delay = self.config.backoff[min(attempt, len(self.config.backoff) - 1)]
                log.info("%s call for %s failed (%s); retrying in %.0fs", endpoint, case_id or "-", exc, delay)
                self.sleep(delay)
                continue
            latency = round((time.perf_counter() - t0) * 1000.0, 3)
            if self.cache is not None:
                self.cache.put(key, endpoint, model, payload, body, latency)
            self._record(key, endpoint, model, case_id, latency, body)
            return value
        raise GatewayError(f"{endpoint} failed after {attempts} attempt(s): {last}")

    def _record(self, key: str, endpoint: str, model: str, case_id: str, latency: float, body: dict[str, Any]) -> None:
        usage = body.get("usage") or {}
        rec = CallRecord(
            key,
            endpoint,
            model,
            case_id,
            latency,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )
        with self._lock:
            self._calls.append(rec)

    def _chat(self, endpoint: str, model: str, request: ChatRequest, case_id: str = "") -> ChatResponse:
        return self._post(
            endpoint, self.chat, CHAT_ROUTE, model, request.payload(model), case_id, ChatResponse.from_payload
        )

    def _request(self, system: str, parts: Sequence[TextPart | ImagePart], logprobs: bool = False) -> ChatRequest:
        c = self.config
        return ChatRequest(system, tuple(parts), logprobs, c.top_k, c.temperature, c.max_tokens, c.max_images)

    def load_image(self, ref: str) -> Image:
        p = Path(ref)
        if not p.is_absolute():
            p = self.image_root / p
        with self._lock:
            img = self._images.get(p)
        if img is None:
            img = Image.load(p)
            with self._lock:
                self._images[p] = img
        return img

    def case_images(self, case: EditCase) -> tuple[Image, Image]:
        return self.load_image(case.original_image), self.load_image(case.edited_image)

    # -- detection ------------------------------------------------------------

    def detect(self, case: EditCase) -> ParseReport:
        """Differences between the case's images; the edit prompt is never sent."""
        original, edited = self.case_images(case)
        req = self._request(
            prompts.DETECTION_SYSTEM_PROMPT, [ImagePart.of(original), ImagePart.of(edited)], logprobs=True
        )
        resp = self._chat("detect", self.config.detector_model, req, case.case_id)
        return attach_confidence(parse_differences(resp.text), resp.tokens)

    def detect_many(self, cases: Sequence[EditCase]) -> list[DetectionResult]:
        def one(case: EditCase) -> DetectionResult:
            try:
                return DetectionResult(case.case_id, self.detect(case))
            except (GatewayError, OSError, ValueError) as exc:
                log.error("detect %s: %s", case.case_id, exc)
                return DetectionResult(case.case_id, None, str(exc))

        return sorted(self._map(one, cases), key=lambda r: r.case_id)

    # -- coherence ------------------------------------------------------------

    def prepare_coherence_images(
        self, case: EditCase, d: Difference, images: tuple[Image, Image] | None = None
    ) -> tuple[Image, Image]:
        """Outline the difference: additions on the edited image, edits and removals on the original."""
        original, edited = images or self.case_images(case)
        color = self.config.color(d.command)
        t = self.config.overlay_thickness
        if d.command is EditCommand.ADD:
            return original, draw_box_outline(edited, d.bbox, color, t)
        return draw_box_outline(original, d.bbox, color, t), edited

    def assess_coherence(self, case: EditCase, d: Difference) -> CoherenceVerdict:
        original, edited = self.prepare_coherence_images(case, d)
        text = prompts.fill_coherence(case.prompt, serialize_difference(d))
        req = self._request(prompts.COHERENCE_SYSTEM_PROMPT, [TextPart(text), ImagePart.of(original), ImagePart.of(edited)])
        resp = self._chat("coherence", self.config.coherence_model, req, case.case_id)
        return parse_verdict(resp.text)

    def assess_many(self, items: Sequence[tuple[EditCase, int, Difference]]) -> list[CoherenceResult]:
        def one(item: tuple[EditCase, int, Difference]) -> CoherenceResult:
            case, idx, d = item
            try:
                return CoherenceResult(case.case_id, idx, d, self.assess_coherence(case, d))
            except (GatewayError, OSError, ValueError) as exc:
                log.error("coherence %s#%d: %s", case.case_id, idx, exc)
                return CoherenceResult(case.case_id, idx, d, None, str(exc))

        return sorted(self._map(one, items), key=lambda r: (r.case_id, r.index))

    # -- captions -------------------------------------------------------------

    def caption(self, image: Image, case_id: str = "") -> str:
        req = self._request(prompts.CAPTION_SYSTEM_PROMPT, [TextPart(prompts.CAPTION_USER_PROMPT), ImagePart.of(image)])
        return self._chat("caption", self.config.caption_model, req, case_id).text.strip()

    def compose_target_caption(self, original_caption: str, prompt: str, case_id: str = "") -> str:
        if not prompt or not prompt.strip():
            raise ValueError("empty prompt")
        req = self._request(prompts.COMPOSE_SYSTEM_PROMPT, [TextPart(prompts.fill_compose(original_caption, prompt))])
        return self._chat("compose", self.config.compose_model, req, case_id).text.strip()

    # -- embeddings -----------------------------------------------------------

    def _embed(self, item: str | ImagePart, case_id: str) -> np.ndarray:
        model = self.config.embed_model
        vec = self._post(
            "embed", self.embeddings, EMBED_ROUTE, model, embedding_payload(model, item), case_id, embedding_from_payload
        )
        v = np.asarray(vec, dtype=np.float64)
        norm = float(np.linalg.norm(v))
        if v.ndim != 1 or v.size == 0 or not np.isfinite(norm) or norm == 0.0:
            raise GatewayError("embedding backend returned an empty or zero vector")
        with self._lock:
            if self._dim is None:
                self._dim = v.size
            elif self._dim != v.size:
                raise GatewayError(f"embedding dimension mismatch: got {v.size}, expected {self._dim}")
        return v / norm

    def embed_image(self, image: Image, case_id: str = "") -> np.ndarray:
        return self._embed(ImagePart.of(image), case_id)

    def embed_text(self, text: str, case_id: str = "") -> np.ndarray:
        return self._embed(text, case_id)

    def _map(self, fn: Callable[[Any], Any], items: Sequence[Any]) -> list[Any]:
        n = max(1, int(self.config.concurrency))
        if n == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))


__all__ = [
    "CallRecord",
    "CoherenceResult",
    "DetectionResult",
    "Gateway",
    "GatewayConfig",
    "GatewayError",
    "OVERLAY_COLORS",
    "parse_verdict",
]
