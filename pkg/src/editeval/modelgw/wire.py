"""Request/response types and transports for an OpenAI-compatible inference API.

Chat goes to ``POST {base}/chat/completions`` with interleaved text and
data-URI image parts; embeddings go to ``POST {base}/embeddings`` with either a
string input or a list holding one image part.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass
from typing import Any, Callable, Protocol, Sequence, Union

from ..core import Image
from ..parser import TokenLogprob

log = logging.getLogger(__name__)

CHAT_ROUTE = "chat/completions"
EMBED_ROUTE = "embeddings"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True, eq=False)
class ImagePart:
    png: bytes

    @classmethod
    def of(cls, image: Image) -> "ImagePart":
        return cls(image.encode("PNG"))

    def data_uri(self) -> str:
        return "data:image/png;base64," + base64.b64encode(self.png).decode("ascii")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ImagePart) and other.png == self.png

    def __hash__(self) -> int:
        return hash(self.png)


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_parts: tuple[Part, ...]
    want_logprobs: bool = False
    top_k_alternatives: int = 5
    temperature: float = 0.0
    max_tokens: int = 512
    max_images: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_images < 2:
            raise ValueError("backend must accept at least two images")
        n_img = sum(isinstance(p, ImagePart) for p in self.user_parts)
        if n_img > self.max_images:
            raise ValueError(f"{n_img} images exceed the backend limit of {self.max_images}")
        if self.want_logprobs and not 1 <= self.top_k_alternatives <= 20:
            raise ValueError("top_k_alternatives must be in 1..20")

    def payload(self, model: str) -> dict[str, Any]:
        content: list[dict[str, Any]] = []
        for p in self.user_parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": p.data_uri()}})
        body: dict[str, Any] = {
            "model": model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": content},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.want_logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = self.top_k_alternatives
        return body


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tokens: tuple[TokenLogprob, ...] = ()
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @classmethod
    def from_payload(cls, body: dict[str, Any]) -> "ChatResponse":
        try:
            choice = body["choices"][0]
            text = choice["message"].get("content") or ""
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise ProtocolError(f"malformed chat response: {exc!r}") from None
        raw = ((choice.get("logprobs") or {}).get("content")) or []
        tokens = tuple(TokenLogprob.from_json(t) for t in raw)
        if tokens and "".join(t.token_text for t in tokens) != text:
            # alignment would be meaningless; confidence falls back to unscored
            log.warning("token stream does not reproduce the completion text; dropping logprobs")
            tokens = ()
        usage = body.get("usage") or {}
        return cls(text, tokens, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))


def embedding_payload(model: str, item: str | ImagePart) -> dict[str, Any]:
    if isinstance(item, ImagePart):
        return {"model": model, "input": [{"type": "image_url", "image_url": {"url": item.data_uri()}}]}
    return {"model": model, "input": item}


def embedding_from_payload(body: dict[str, Any]) -> list[float]:
    try:
        vec = body["data"][0]["embedding"]
        return [float(v) for v in vec]
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed embedding response: {exc!r}") from None


# --- transports ------------------------------------------------------------------


class TransportError(Exception):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class ProtocolError(TransportError):
    def __init__(self, message: str):
        super().__init__(message, retryable=False)


class Transport(Protocol):
    def post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]: ...


class HttpTransport:
    """JSON POST over httpx. 429 and 5xx are retryable, other 4xx are not."""

    def __init__(self, base_url: str, api_key: str | None = None, timeout: float = 120.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout)
        self._httpx = httpx

    def post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}/{route}"
        try:
            r = self._client.post(url, json=payload)
        except self._httpx.HTTPError as exc:
            raise TransportError(f"{url}: {exc.__class__.__name__}: {exc}") from None
        if r.status_code == 429 or r.status_code >= 500:
            raise TransportError(f"{url}: HTTP {r.status_code}")
        if r.status_code >= 400:
            raise TransportError(f"{url}: HTTP {r.status_code}: {r.text[:200]}", retryable=False)
        try:
            return r.json()
        except ValueError:
            raise ProtocolError(f"{url}: response is not JSON") from None

    def close(self) -> None:
        self._client.close()


class CallableTransport:
    """In-process transport wrapping ``handler(route, payload) -> body``."""

    def __init__(self, handler: Callable[[str, dict[str, Any]], dict[str, Any]]):
        self.handler = handler

    def post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        return self.handler(route, payload)


def image_parts(payload: dict[str, Any]) -> list[bytes]:
    """Decoded PNG bytes of every image part in a chat or embedding payload."""
    out = []

    def walk(parts: Sequence[Any]) -> None:
        for p in parts:
            if isinstance(p, dict) and p.get("type") == "image_url":
                url = p["image_url"]["url"]
                out.append(base64.b64decode(url.split(",", 1)[1]))

    for m in payload.get("messages", []):
        if isinstance(m.get("content"), list):
            walk(m["content"])
    if isinstance(payload.get("input"), list):
        walk(payload["input"])
    return out


def text_parts(payload: dict[str, Any]) -> list[str]:
    """All text content in a chat payload, system prompt included."""
    out = []
    for m in payload.get("messages", []):
        c = m.get("content")
        if isinstance(c, str):
            out.append(c)
        elif isinstance(c, list):
            out.extend(p["text"] for p in c if isinstance(p, dict) and p.get("type") == "text")
    return out


__all__ = [
    "CHAT_ROUTE",
    "EMBED_ROUTE",
    "CallableTransport",
    "ChatRequest",
    "ChatResponse",
    "HttpTransport",
    "ImagePart",
    "ProtocolError",
    "TextPart",
    "Transport",
    "TransportError",
    "embedding_from_payload",
    "embedding_payload",
    "image_parts",
    "text_parts",
]
