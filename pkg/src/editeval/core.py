"""Domain types, box geometry and raster primitives.

Pixel semantics: a pixel (row, col) of a W x H image has its center at
``((col + 0.5) / W, (row + 0.5) / H)`` in normalized coordinates, and belongs
to a box when that center lies in the half-open box ``[x_min, x_max) x
[y_min, y_max)``.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

RGB = tuple[int, int, int]

# Boxes serialize with 6 decimals; anything thinner would collapse on disk.
MIN_EXTENT = 1e-6


class EditCommand(str, enum.Enum):
    ADD = "ADD"
    REMOVE = "REMOVE"
    EDIT = "EDIT"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, token: str) -> "EditCommand":
        try:
            return cls(token.strip().upper())
        except ValueError:
            raise ValueError(f"unknown edit command {token!r}") from None


@dataclass(frozen=True)
class NormalizedBBox:
    """Axis-aligned box in fractions of image width/height."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(isinstance(c, (int, float)) and math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite numbers: {coords}")
        if not (0.0 <= self.x_min < self.x_max <= 1.0):
            raise ValueError(f"invalid x range [{self.x_min}, {self.x_max}]")
        if not (0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValueError(f"invalid y range [{self.y_min}, {self.y_max}]")
        if self.x_max - self.x_min < MIN_EXTENT or self.y_max - self.y_min < MIN_EXTENT:
            raise ValueError(f"degenerate box {coords}")
        for name, c in zip(("x_min", "y_min", "x_max", "y_max"), coords):
            object.__setattr__(self, name, float(c))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "NormalizedBBox":
        if len(values) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self, ndigits: int = 6) -> list[float]:
        return [round(c, ndigits) for c in self.as_tuple()]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def pixel_span(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Half-open pixel index range ``(row0, row1, col0, col1)`` covered."""
        col0 = max(0, math.ceil(self.x_min * width - 0.5))
        col1 = min(width, math.ceil(self.x_max * width - 0.5))
        row0 = max(0, math.ceil(self.y_min * height - 0.5))
        row1 = min(height, math.ceil(self.y_max * height - 0.5))
        return row0, max(row0, row1), col0, max(col0, col1)


def iou(a: NormalizedBBox, b: NormalizedBBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area() + b.area() - inter)


def pixel_area(b: NormalizedBBox, width: int, height: int) -> float:
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    return (b.x_max - b.x_min) * width * (b.y_max - b.y_min) * height


@dataclass(frozen=True)
class Difference:
    """One detected object-level change."""

    command: EditCommand
    subject: str
    bbox: NormalizedBBox
    confidence: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "command", EditCommand(self.command))
        if not self.subject or not self.subject.strip():
            raise ValueError("difference subject must be non-empty")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict[str, Any]:
        return {
            "command": self.command.value,
            "subject": self.subject,
            "bbox": self.bbox.to_list(),
            "confidence": round(self.confidence, 9),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Difference":
        return cls(
            EditCommand.parse(d["command"]),
            d["subject"],
            NormalizedBBox.from_list(d["bbox"]),
            float(d.get("confidence", 1.0)),
        )


@dataclass(frozen=True)
class GroundTruthDifference:
    command: EditCommand
    subject: str
    bbox: NormalizedBBox
    # None when the label comes from data construction and coherence is unset
    coherent: bool | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "command", EditCommand(self.command))
        if not self.subject or not self.subject.strip():
            raise ValueError("ground-truth subject must be non-empty")

    def as_difference(self) -> Difference:
        return Difference(self.command, self.subject, self.bbox, 1.0)

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "command": self.command.value,
            "subject": self.subject,
            "bbox": self.bbox.to_list(),
        }
        if self.coherent is not None:
            d["coherent"] = self.coherent
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "GroundTruthDifference":
        coherent = d.get("coherent")
        return cls(
            EditCommand.parse(d["command"]),
            d["subject"],
            NormalizedBBox.from_list(d["bbox"]),
            None if coherent is None else bool(coherent),
        )


@dataclass(frozen=True)
class HumanRatings:
    prompt_adherence: int
    background_preservation: int

    def __post_init__(self) -> None:
        for name in ("prompt_adherence", "background_preservation"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 1 <= v <= 5:
                raise ValueError(f"{name} must be an integer in 1..5, got {v!r}")


_CASE_KEYS = {
    "case_id",
    "original_image",
    "edited_image",
    "prompt",
    "width",
    "height",
    "ground_truth",
    "human_ratings",
}


@dataclass(frozen=True)
class EditCase:
    case_id: str
    original_image: str
    edited_image: str
    prompt: str
    width: int
    height: int
    ground_truth: tuple[GroundTruthDifference, ...] | None = None
    human_ratings: HumanRatings | None = None
    # unknown fields from the case file, kept for round-tripping
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"case {self.case_id}: width and height must be positive")
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", tuple(self.ground_truth))

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = dict(self.extra)
        d.update(
            case_id=self.case_id,
            original_image=self.original_image,
            edited_image=self.edited_image,
            prompt=self.prompt,
            width=self.width,
            height=self.height,
        )
        if self.ground_truth is not None:
            d["ground_truth"] = [g.to_json() for g in self.ground_truth]
        if self.human_ratings is not None:
            d["human_ratings"] = {
                "prompt_adherence": self.human_ratings.prompt_adherence,
                "background_preservation": self.human_ratings.background_preservation,
            }
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "EditCase":
        gt = d.get("ground_truth")
        hr = d.get("human_ratings")
        return cls(
            case_id=str(d["case_id"]),
            original_image=str(d["original_image"]),
            edited_image=str(d["edited_image"]),
            prompt=str(d["prompt"]),
            width=int(d["width"]),
            height=int(d["height"]),
            ground_truth=None if gt is None else tuple(GroundTruthDifference.from_json(g) for g in gt),
            human_ratings=None if hr is None else HumanRatings(**hr),
            extra={k: v for k, v in d.items() if k not in _CASE_KEYS},
        )


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable 8-bit RGB raster; ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8 pixels, got {px.shape} {px.dtype}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("image must be non-empty")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, width: int, height: int, color: RGB = (0, 0, 0)) -> "Image":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = color
        return cls(px)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]

    def encode(self, fmt: str = "PNG", quality: int | None = None) -> bytes:
        buf = io.BytesIO()
        kwargs = {} if quality is None else {"quality": quality}
        PILImage.fromarray(self.pixels, "RGB").save(buf, format=fmt, **kwargs)
        return buf.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Image":
        with PILImage.open(io.BytesIO(data)) as im:
            return cls(np.asarray(im.convert("RGB")))

    @classmethod
    def load(cls, path: str | Path) -> "Image":
        with PILImage.open(path) as im:
            return cls(np.asarray(im.convert("RGB")))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        fmt = "JPEG" if path.suffix.lower() in (".jpg", ".jpeg") else "PNG"
        path.write_bytes(self.encode(fmt))


def _check_color(color: Iterable[int]) -> RGB:
    c = tuple(int(v) for v in color)
    if len(c) != 3 or not all(0 <= v <= 255 for v in c):
        raise ValueError(f"color must be three 0..255 ints, got {color!r}")
    return c  # type: ignore[return-value]


def draw_box_outline(img: Image, b: NormalizedBBox, color: RGB, thickness: int = 1) -> Image:
    """Copy of ``img`` with a rectangle outline drawn just inside ``b``."""
    if thickness < 1:
        raise ValueError("thickness must be ≥ 1")
    color = _check_color(color)
    r0, r1, c0, c1 = b.pixel_span(img.width, img.height)
    # sub-pixel boxes still get a visible one-pixel mark
    if r1 == r0:
        r0 = min(r0, img.height - 1)
        r1 = r0 + 1
    if c1 == c0:
        c0 = min(c0, img.width - 1)
        c1 = c0 + 1
    px = img.pixels.copy()
    t = thickness
    px[r0 : min(r0 + t, r1), c0:c1] = color
    px[max(r1 - t, r0) : r1, c0:c1] = color
    px[r0:r1, c0 : min(c0 + t, c1)] = color
    px[r0:r1, max(c1 - t, c0) : c1] = color
    return Image(px)


def fill_region(img: Image, b: NormalizedBBox, fill: RGB = (0, 0, 0)) -> Image:
    fill = _check_color(fill)
    r0, r1, c0, c1 = b.pixel_span(img.width, img.height)
    px = img.pixels.copy()
    px[r0:r1, c0:c1] = fill
    return Image(px)


def fill_regions(img: Image, boxes: Iterable[NormalizedBBox], fill: RGB = (0, 0, 0)) -> Image:
    for b in boxes:
        img = fill_region(img, b, fill)
    return img


def jpeg_reencode(img: Image, quality: int) -> Image:
    if isinstance(quality, bool) or not isinstance(quality, int) or not 1 <= quality <= 100:
        raise ValueError("quality out of range")
    try:
        data = img.encode("JPEG", quality=quality)
        out = Image.decode(data)
    except OSError as exc:
        raise RuntimeError(f"JPEG re-encode failed: {exc}") from exc
    return out


@dataclass(frozen=True)
class CoherenceVerdict:
    """Binary coherence decision for one difference, with the model's rationale."""

    decision: bool
    rationale: str = ""
    flagged_unparseable: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "decision": self.decision,
            "rationale": self.rationale,
            "flagged_unparseable": self.flagged_unparseable,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CoherenceVerdict":
        return cls(bool(d["decision"]), d.get("rationale", ""), bool(d.get("flagged_unparseable", False)))


class SchemaError(ValueError):
    """Input file problem, carrying the 1-based line number when known."""

    def __init__(self, path: str | Path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def load_cases(path: str | Path) -> list[EditCase]:
    """Read a case file: one EditCase JSON object per line, blank lines skipped."""
    path = Path(path)
    cases = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if not isinstance(d, dict):
                    raise ValueError("expected a JSON object")
                case = EditCase.from_json(d)
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(path, lineno, f"bad case record: {exc}") from None
            if case.case_id in seen:
                raise SchemaError(path, lineno, f"duplicate case_id {case.case_id}")
            seen.add(case.case_id)
            cases.append(case)
    return cases


def dumps_cases(cases: Iterable[EditCase]) -> str:
    return "".join(json.dumps(c.to_json(), sort_keys=True) + "\n" for c in cases)
