"""Gateway to external inference services plus a scripted mock backend."""

from ..core import CoherenceVerdict
from .cache import ResponseCache, cache_key
from .gateway import (
    OVERLAY_COLORS,
    CallRecord,
    CoherenceResult,
    DetectionResult,
    Gateway,
    GatewayConfig,
    GatewayError,
    parse_verdict,
)
from .mock import MockBackend, MockFailure, MockInferenceServer, ScriptedDetection, image_key
from .wire import (
    CallableTransport,
    ChatRequest,
    ChatResponse,
    HttpTransport,
    ImagePart,
    TextPart,
    TransportError,
)

__all__ = [
    "OVERLAY_COLORS",
    "CallRecord",
    "CallableTransport",
    "ChatRequest",
    "ChatResponse",
    "CoherenceResult",
    "CoherenceVerdict",
    "DetectionResult",
    "Gateway",
    "GatewayConfig",
    "GatewayError",
    "HttpTransport",
    "ImagePart",
    "MockBackend",
    "MockFailure",
    "MockInferenceServer",
    "ResponseCache",
    "ScriptedDetection",
    "TextPart",
    "TransportError",
    "cache_key",
    "image_key",
    "parse_verdict",
]
