"""Content-addressed response cache: one JSON file per request."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any


def cache_key(endpoint: str, model: str, request: dict[str, Any]) -> str:
    """sha256 over the canonical JSON of (endpoint id, model id, request body)."""
    blob = json.dumps(
        {"endpoint": endpoint, "model": model, "request": request},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheEntry:
    key: str
    response: dict[str, Any]
    latency_ms: float


class ResponseCache:
    """Files live at ``root/<key[:2]>/<key>.json`` and hold request and response.

    Writes go to a temp file in the same directory and are renamed into place,
    so concurrent writers and crashed runs never leave a partial entry.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> CacheEntry | None:
        p = self.path(key)
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except ValueError:
            # unreadable entry: treat as a miss and let the next put replace it
            return None
        return CacheEntry(key, d["response"], float(d.get("latency_ms", 0.0)))

    def put(self, key: str, endpoint: str, model: str, request: dict[str, Any], response: dict[str, Any], latency_ms: float) -> None:
        p = self.path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        body = json.dumps(
            {
                "key": key,
                "endpoint": endpoint,
                "model": model,
                "request": request,
                "response": response,
                "latency_ms": round(latency_ms, 3),
            },
            sort_keys=True,
        )
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(body)
            os.replace(tmp, p)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.json")) if self.root.exists() else 0
