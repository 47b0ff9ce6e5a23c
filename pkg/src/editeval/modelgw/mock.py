"""Scripted stand-in for the inference API, usable in-process or over HTTP.

Detections are looked up by the edited image's pixel hash, coherence answers
by the (edit prompt, serialized change) pair found in the user text, captions
by image hash and compositions by (caption, prompt). Every request is kept in
``requests`` for wire-level assertions.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..core import Image
from . import prompts
from .wire import CHAT_ROUTE, EMBED_ROUTE, TransportError, image_parts, text_parts

COMMAND_SUBTOKENS = {"ADD": ("ADD",), "REMOVE": ("REM", "OVE"), "EDIT": ("EDIT",)}
# probability mass left for a non-command alternative at command positions
_DISTRACTOR = ("The", 0.03)
_TOKEN = re.compile(r"\s*[A-Za-z]+|\s*\d|\s*[^\sA-Za-z\d]|\s+")
_LINE_HEAD = re.compile(r"^([\s\-*]*)(ADD|REMOVE|EDIT)(?![A-Za-z])")
_PROMPT_LINE = re.compile(r"^1\. The original edit prompt is: (.*)$", re.M)
_CHANGE_LINE = re.compile(r"^2\. The detected change to evaluate is: (.*)$", re.M)
_COMPOSE_CAPTION = re.compile(r"^Caption of the original image: (.*)$", re.M)
_COMPOSE_PROMPT = re.compile(r"^Edit instruction: (.*)$", re.M)


def image_key(image: Image) -> str:
    h = hashlib.sha256()
    h.update(f"{image.height}x{image.width}:".encode())
    h.update(image.pixels.tobytes())
    return h.hexdigest()


class MockFailure(TransportError):
    def __init__(self, status: int):
        super().__init__(f"HTTP {status}", retryable=status == 429 or status >= 500)
        self.status = status


@dataclass(frozen=True)
class ScriptedDetection:
    """Completion text plus, per command line in order, the probabilities of
    ADD/REMOVE/EDIT at that line's command token (default 0.9 on the chosen one)."""

    text: str
    command_probs: tuple[Mapping[str, float], ...] | None = None


def tokenize(text: str, command_probs: Sequence[Mapping[str, float]] | None = None, top_k: int = 5) -> list[dict[str, Any]]:
    """OpenAI-shaped logprob entries whose tokens concatenate to ``text``.

    REMOVE is split as REM + OVE so first-subtoken handling gets exercised.
    """
    out: list[dict[str, Any]] = []

    def plain(s: str) -> None:
        for tok in _TOKEN.findall(s):
            out.append({"token": tok, "logprob": 0.0, "top_logprobs": [{"token": tok, "logprob": 0.0}]})

    k = 0
    for line in text.splitlines(keepends=True):
        m = _LINE_HEAD.match(line)
        if not m:
            plain(line)
            continue
        plain(m.group(1))
        cmd = m.group(2)
        if command_probs is not None and k < len(command_probs):
            probs = {c: float(command_probs[k].get(c, 0.0)) for c in COMMAND_SUBTOKENS}
        else:
            probs = {c: (0.9 if c == cmd else 0.05) for c in COMMAND_SUBTOKENS}
        k += 1
        scale = (1.0 - _DISTRACTOR[1]) / sum(probs.values())
        alts = [(COMMAND_SUBTOKENS[c][0], p * scale) for c, p in probs.items() if p > 0]
        alts.append(_DISTRACTOR)
        alts.sort(key=lambda a: -a[1])
        first, *rest = COMMAND_SUBTOKENS[cmd]
        chosen = probs[cmd] * scale
        out.append(
            {
                "token": first,
                "logprob": math.log(chosen) if chosen > 0 else -100.0,
                "top_logprobs": [{"token": t, "logprob": math.log(p)} for t, p in alts[:top_k]],
            }
        )
        for sub in rest:
            out.append({"token": sub, "logprob": 0.0, "top_logprobs": [{"token": sub, "logprob": 0.0}]})
        plain(line[m.end():])
    return out


def mock_image_embedding(image: Image) -> list[float]:
    mean = image.pixels.reshape(-1, 3).mean(axis=0) / 255.0
    v = np.array([mean[0], mean[1], mean[2], 1.0])
    return (v / np.linalg.norm(v)).tolist()


def mock_text_embedding(text: str) -> list[float]:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    v = np.array([int.from_bytes(digest[2 * i : 2 * i + 2], "big") / 32767.5 - 1.0 for i in range(4)])
    return (v / np.linalg.norm(v)).tolist()


class MockBackend:
    def __init__(
        self,
        detections: Mapping[str, ScriptedDetection | str] | None = None,
        coherence: Mapping[tuple[str, str], str] | None = None,
        captions: Mapping[str, str] | None = None,
        compositions: Mapping[tuple[str, str], str] | None = None,
        default_detection: str = "",
        default_coherence: str = 'Reasoning: nothing scripted for this change.\nDecision: "NO"',
        default_caption: str = "a photo",
    ):
        self.detections = {k: (v if isinstance(v, ScriptedDetection) else ScriptedDetection(v)) for k, v in (detections or {}).items()}
        self.coherence = dict(coherence or {})
        self.captions = dict(captions or {})
        self.compositions = dict(compositions or {})
        self.default_detection = default_detection
        self.default_coherence = default_coherence
        self.default_caption = default_caption
        self.requests: list[tuple[str, dict[str, Any]]] = []
        self._failures: list[int] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, script: Mapping[str, Any], image_root: str | Path = ".") -> "MockBackend":
        """Build from a JSON-able script whose detection and caption keys are image paths."""
        root = Path(image_root)

        def key(ref: str) -> str:
            p = Path(ref)
            return image_key(Image.load(p if p.is_absolute() else root / p))

        detections = {
            key(ref): ScriptedDetection(
                d["text"], None if d.get("command_probs") is None else tuple(d["command_probs"])
            )
            if isinstance(d, dict)
            else ScriptedDetection(d)
            for ref, d in script.get("detections", {}).items()
        }
        coherence = {(c["prompt"], c["change"]): c["response"] for c in script.get("coherence", [])}
        captions = {key(ref): text for ref, text in script.get("captions", {}).items()}
        compositions = {(c["caption"], c["prompt"]): c["response"] for c in script.get("compositions", [])}
        return cls(
            detections,
            coherence,
            captions,
            compositions,
            **{k: script[k] for k in ("default_detection", "default_coherence", "default_caption") if k in script},
        )

    def fail_next(self, n: int, status: int = 503) -> None:
        with self._lock:
            self._failures.extend([status] * n)

    @property
    def request_count(self) -> int:
        with self._lock:
            return len(self.requests)

    def handle(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            self.requests.append((route, payload))
            status = self._failures.pop(0) if self._failures else None
        if status is not None:
            raise MockFailure(status)
        route = route.strip("/")
        if route.endswith(CHAT_ROUTE):
            return self._chat(payload)
        if route.endswith(EMBED_ROUTE):
            return self._embed(payload)
        raise MockFailure(404)

    def _chat(self, payload: dict[str, Any]) -> dict[str, Any]:
        texts = text_parts(payload)
        system = texts[0] if texts else ""
        user = "\n".join(texts[1:])
        images = [Image.decode(b) for b in image_parts(payload)]
        probs = None
        if system == prompts.DETECTION_SYSTEM_PROMPT:
            script = self.detections.get(image_key(images[-1])) if images else None
            text = script.text if script else self.default_detection
            probs = script.command_probs if script else None
        elif system == prompts.COHERENCE_SYSTEM_PROMPT:
            p, c = _PROMPT_LINE.search(user), _CHANGE_LINE.search(user)
            key = (p.group(1) if p else "", c.group(1) if c else "")
            text = self.coherence.get(key, self.default_coherence)
        elif system == prompts.CAPTION_SYSTEM_PROMPT:
            text = self.captions.get(image_key(images[0]), self.default_caption) if images else self.default_caption
        elif system == prompts.COMPOSE_SYSTEM_PROMPT:
            cap, pr = _COMPOSE_CAPTION.search(user), _COMPOSE_PROMPT.search(user)
            cap_s, pr_s = (cap.group(1) if cap else ""), (pr.group(1) if pr else "")
            text = self.compositions.get((cap_s, pr_s), f"{cap_s}, after: {pr_s}")
        else:
            raise MockFailure(400)
        tokens = tokenize(text, probs, int(payload.get("top_logprobs") or 5))
        choice: dict[str, Any] = {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
        if payload.get("logprobs"):
            choice["logprobs"] = {"content": tokens}
        return {
            "object": "chat.completion",
            "model": payload.get("model"),
            "choices": [choice],
            "usage": {
                "prompt_tokens": sum(len(t.split()) for t in texts) + 256 * len(images),
                "completion_tokens": len(tokens),
            },
        }

    def _embed(self, payload: dict[str, Any]) -> dict[str, Any]:
        item = payload.get("input")
        if isinstance(item, str):
            vec = mock_text_embedding(item)
            n_tok = len(item.split())
        else:
            images = image_parts(payload)
            if len(images) != 1:
                raise MockFailure(400)
            vec = mock_image_embedding(Image.decode(images[0]))
            n_tok = 256
        return {
            "object": "list",
            "model": payload.get("model"),
            "data": [{"object": "embedding", "index": 0, "embedding": vec}],
            "usage": {"prompt_tokens": n_tok, "total_tokens": n_tok},
        }


class MockInferenceServer:
    """Serve a :class:`MockBackend` on ``http://127.0.0.1:<port>/v1``."""

    def __init__(self, backend: MockBackend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        backend_ref = backend

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802
                length = int(self.headers.get("Content-Length") or 0)
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                    route = self.path.split("/v1/", 1)[-1]
                    body, status = backend_ref.handle(route, payload), 200
                except MockFailure as exc:
                    body, status = {"error": {"message": str(exc)}}, exc.status
                except ValueError:
                    body, status = {"error": {"message": "bad request"}}, 400
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args: Any) -> None:
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockInferenceServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "MockInferenceServer":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()
