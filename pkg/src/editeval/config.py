"""Run configuration: defaults, YAML file, overrides, and a path-independent hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .datagen import DEFAULT_UNCHANGED

API_KEY_ENV = "EDITEVAL_API_KEY"

# where a run lives and how fast it talks to servers does not change its results
UNHASHED_FIELDS = frozenset(
    {"dataset", "image_root", "output_dir", "cache_dir", "chat_url", "embeddings_url", "concurrency",
     "annotations", "embeddings", "masks_root", "pairs_output", "manifest_output"}
)


class ConfigError(ValueError):
    pass


def _balance_default() -> dict[str, float]:
    share = (1 - DEFAULT_UNCHANGED) / 3
    return {"add": share, "remove": share, "edit": share, "unchanged": DEFAULT_UNCHANGED}


@dataclass
class RunConfig:
    # data and locations
    dataset: str | None = None
    image_root: str | None = None
    output_dir: str = "run"
    cache_dir: str | None = ".editeval-cache"
    # endpoints; the API key is read from the environment only
    chat_url: str | None = None
    embeddings_url: str | None = None
    detector_model: str = "detector"
    coherence_model: str = "coherence"
    caption_model: str = "captioner"
    compose_model: str = "composer"
    embed_model: str = "embedder"
    top_k: int = 5
    temperature: float = 0.0
    max_tokens: int = 512
    max_images: int = 2
    request_timeout: float = 120.0
    retries: int = 3
    backoff: list[float] = field(default_factory=lambda: [1.0, 4.0, 16.0])
    concurrency: int = 4
    # overlays and masking
    overlay_thickness: int = 4
    add_color: list[int] = field(default_factory=lambda: [255, 0, 0])
    edit_color: list[int] = field(default_factory=lambda: [0, 255, 0])
    remove_color: list[int] = field(default_factory=lambda: [0, 0, 255])
    mask_fill: list[int] = field(default_factory=lambda: [0, 0, 0])
    # thresholds
    edit_iou: float = 0.5
    confidence_floor: float = 0.0
    sim_threshold: float = 0.6
    max_class_diff: int = 15
    min_side_px: int = 16
    # seeds
    seed: int = 0
    # correlation study
    aggregation: str = "per_case"
    group_field: str = "model"
    align_field: str = "source_id"
    # training-data construction
    annotations: str | None = None
    embeddings: str | None = None
    normalize_embeddings: bool = False
    masks_root: str | None = None
    pairs_output: str = "stage1_pairs.jsonl"
    manifest_output: str = "stage2_manifest.jsonl"
    op_balance: dict[str, float] = field(default_factory=_balance_default)
    jpeg_probability: float = 0.5

    def validate(self) -> "RunConfig":
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        if self.overlay_thickness < 1:
            raise ConfigError("overlay_thickness must be >= 1")
        if self.aggregation not in ("per_case", "group_mean"):
            raise ConfigError("aggregation must be per_case or group_mean")
        if not 0.0 <= self.jpeg_probability <= 1.0:
            raise ConfigError("jpeg_probability must lie in [0, 1]")
        for name in ("add_color", "edit_color", "remove_color", "mask_fill"):
            c = getattr(self, name)
            if len(c) != 3 or any(not isinstance(v, int) or not 0 <= v <= 255 for v in c):
                raise ConfigError(f"{name} must be three integers in 0..255")
        if set(self.op_balance) != {"add", "remove", "edit", "unchanged"}:
            raise ConfigError("op_balance needs exactly add, remove, edit, unchanged")
        return self

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hashed_view(self) -> dict[str, Any]:
        return {k: v for k, v in self.to_json().items() if k not in UNHASHED_FIELDS}

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_view(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def api_key(self) -> str | None:
        return os.environ.get(API_KEY_ENV) or None

    def resolved_image_root(self) -> Path:
        if self.image_root:
            return Path(self.image_root)
        if self.dataset:
            return Path(self.dataset).parent
        return Path(".")


FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def _flatten(tree: Mapping[str, Any], where: str = "") -> dict[str, Any]:
    """Accept flat keys or keys grouped under arbitrary section names."""
    out: dict[str, Any] = {}
    for k, v in tree.items():
        key = str(k).replace("-", "_")
        if key in FIELD_TYPES:
            out[key] = v
        elif isinstance(v, Mapping):
            out.update(_flatten(v, f"{where}{key}."))
        else:
            raise ConfigError(f"unknown config key {where}{key}")
    return out


def _coerce(name: str, value: Any) -> Any:
    default = getattr(RunConfig(), name)
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = yaml.safe_load(value)
            return [type(default[0])(v) for v in value]
        if isinstance(default, dict):
            if isinstance(value, str):
                value = yaml.safe_load(value)
            return {str(k): float(v) for k, v in dict(value).items()}
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from None


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the YAML file, then explicit overrides (None values ignored)."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(tree, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        for k in ("api_key", "api-key"):
            if k in tree:
                raise ConfigError(f"API keys are read from ${API_KEY_ENV} only, not from config files")
        values.update(_flatten(tree))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k.replace("-", "_")] = v
    cfg = RunConfig()
    for k, v in values.items():
        if k not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {k}")
        setattr(cfg, k, _coerce(k, v))
    return cfg.validate()
