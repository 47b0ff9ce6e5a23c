"""Parse detector completions into :class:`Difference` values.

Accepted line shape (case-insensitive command)::

    COMMAND: subject text, [x0, y0, x1, y1]
    COMMAND: subject text, (x0, y0, x1, y1)
    COMMAND: subject text, ([x0, y0, x1, y1])

Leading list markers (``-``, ``*``, ``1.``) and wrapping quotes are tolerated.
Every non-empty line yields either a difference or a malformed-line record;
parsing never raises.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

from .core import MIN_EXTENT, Difference, EditCommand, NormalizedBBox

# coordinates this far outside [0, 1] are treated as float noise and clamped
CLAMP_TOLERANCE = 0.01

REASON_UNKNOWN_COMMAND = "unknown-command"
REASON_BAD_COORDINATES = "bad-coordinates"
REASON_OUT_OF_RANGE = "out-of-range"
REASON_DEGENERATE_BOX = "degenerate-box"
REASON_EMPTY_SUBJECT = "empty-subject"

_PREFIX = re.compile(r"^(?:[-*•>]+\s*|\d+[.)]\s+)*")
_HEAD = re.compile(r"^([A-Za-z_]+)\s*:\s*(.*)$", re.DOTALL)
_COORDS = re.compile(
    r"""^(?P<subject>.*?)\s*
        (?:\(\s*\[(?P<nested>[^\[\]()]*)\]\s*\)
          |\[(?P<bracket>[^\[\]]*)\]
          |\((?P<paren>[^()]*)\))
        [\s."']*$""",
    re.DOTALL | re.VERBOSE,
)
_QUOTES = "\"'`"


@dataclass(frozen=True)
class TokenLogprob:
    token_text: str
    logprob: float
    top_alternatives: tuple[tuple[str, float], ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "token": self.token_text,
            "logprob": self.logprob,
            "top_logprobs": [{"token": t, "logprob": lp} for t, lp in self.top_alternatives],
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TokenLogprob":
        alts = tuple(
            (a["token"], float(a["logprob"])) for a in d.get("top_logprobs") or ()
        )
        alts = tuple(sorted(alts, key=lambda a: -a[1]))
        return cls(d["token"], float(d["logprob"]), alts)


@dataclass(frozen=True)
class MalformedLine:
    line: str
    reason: str


@dataclass(frozen=True)
class ParseReport:
    differences: tuple[Difference, ...] = ()
    malformed_lines: tuple[MalformedLine, ...] = ()
    raw_text: str = ""
    # character offset in raw_text of each difference's command word
    command_offsets: tuple[int, ...] = ()
    # indices of differences whose confidence could not be scored
    unscored: tuple[int, ...] = field(default=())

    def to_json(self) -> dict[str, Any]:
        return {
            "differences": [d.to_json() for d in self.differences],
            "malformed_lines": [{"line": m.line, "reason": m.reason} for m in self.malformed_lines],
            "raw_text": self.raw_text,
            "command_offsets": list(self.command_offsets),
            "unscored": list(self.unscored),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ParseReport":
        return cls(
            differences=tuple(Difference.from_json(x) for x in d.get("differences", ())),
            malformed_lines=tuple(
                MalformedLine(m["line"], m["reason"]) for m in d.get("malformed_lines", ())
            ),
            raw_text=d.get("raw_text", ""),
            command_offsets=tuple(d.get("command_offsets", ())),
            unscored=tuple(d.get("unscored", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False)


def _clamp(v: float) -> float | None:
    if not math.isfinite(v) or v < -CLAMP_TOLERANCE or v > 1.0 + CLAMP_TOLERANCE:
        return None
    return min(1.0, max(0.0, v))


def _parse_line(line: str) -> tuple[Difference | None, str | None, int]:
    """Returns (difference, failure reason, offset of command within line)."""
    body = _PREFIX.sub("", line, count=1)
    offset = len(line) - len(body)
    stripped = body.lstrip(_QUOTES + " \t")
    offset += len(body) - len(stripped)
    head = _HEAD.match(stripped)
    if head is None:
        return None, REASON_UNKNOWN_COMMAND, offset
    try:
        command = EditCommand.parse(head.group(1))
    except ValueError:
        return None, REASON_UNKNOWN_COMMAND, offset
    m = _COORDS.match(head.group(2).strip())
    if m is None:
        return None, REASON_BAD_COORDINATES, offset
    raw = next(g for g in (m.group("nested"), m.group("bracket"), m.group("paren")) if g is not None)
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 4:
        return None, REASON_BAD_COORDINATES, offset
    try:
        values = [float(p) for p in parts]
    except ValueError:
        return None, REASON_BAD_COORDINATES, offset
    if not all(math.isfinite(v) for v in values):
        return None, REASON_BAD_COORDINATES, offset
    clamped = [_clamp(v) for v in values]
    if any(c is None for c in clamped):
        return None, REASON_OUT_OF_RANGE, offset
    x0, y0, x1, y1 = clamped  # type: ignore[misc]
    if x1 - x0 < MIN_EXTENT or y1 - y0 < MIN_EXTENT:
        return None, REASON_DEGENERATE_BOX, offset
    subject = m.group("subject").strip().strip(",").strip().strip(_QUOTES).strip()
    if not subject:
        return None, REASON_EMPTY_SUBJECT, offset
    box = NormalizedBBox(x0, y0, x1, y1)
    return Difference(command, subject, box, 1.0), None, offset


def parse_differences(raw_text: str) -> ParseReport:
    diffs: list[Difference] = []
    bad: list[MalformedLine] = []
    offsets: list[int] = []
    pos = 0
    text = raw_text if isinstance(raw_text, str) else str(raw_text)
    for line in text.splitlines(keepends=True):
        start = pos
        pos += len(line)
        content = line.rstrip("\r\n")
        if not content.strip():
            continue
        try:
            diff, reason, off = _parse_line(content)
        except Exception:  # totality guard; _parse_line should not raise
            diff, reason, off = None, REASON_BAD_COORDINATES, 0
        if diff is None:
            bad.append(MalformedLine(content, reason or REASON_BAD_COORDINATES))
        else:
            diffs.append(diff)
            offsets.append(start + off)
    return ParseReport(tuple(diffs), tuple(bad), text, tuple(offsets))


def _normalize_token(tok: str) -> str:
    return tok.strip().lstrip("-*•>\"'`").strip().upper()


def _command_for_token(tok: str) -> EditCommand | None:
    """Map an alternative token to the command it begins, if any.

    A token matches a command when it is a non-empty prefix of the command word
    (sub-word tokenization, e.g. ``REM``) or starts with the full word
    (e.g. ``ADD:``). The three commands start with distinct letters so at most
    one can match.
    """
    t = _normalize_token(tok)
    if not t:
        return None
    for c in EditCommand:
        if c.value.startswith(t) or t.startswith(c.value):
            return c
    return None


def command_distribution(alternatives: Sequence[tuple[str, float]]) -> dict[EditCommand, float]:
    """Probability mass per command among the alternatives at one position."""
    mass = {c: 0.0 for c in EditCommand}
    for tok, lp in alternatives:
        c = _command_for_token(tok)
        if c is not None and math.isfinite(lp):
            mass[c] += math.exp(min(lp, 0.0))
    return mass


def attach_confidence(report: ParseReport, tokens: Sequence[TokenLogprob]) -> ParseReport:
    """Set each difference's confidence from the command-token distribution.

    confidence = p(chosen) / (p(ADD) + p(EDIT) + p(REMOVE)), probabilities read
    from the alternatives at the token holding the first character of the
    command word. Unlocatable or unscorable differences keep 1.0 and are listed
    in ``unscored``.
    """
    if not report.differences:
        return report
    starts: list[int] = []
    pos = 0
    for t in tokens:
        starts.append(pos)
        pos += len(t.token_text)
    aligned = "".join(t.token_text for t in tokens) == report.raw_text
    new_diffs: list[Difference] = []
    unscored: list[int] = []
    for k, (d, off) in enumerate(zip(report.differences, report.command_offsets)):
        conf = None
        if aligned and tokens:
            idx = _token_at(starts, off)
            tok = tokens[idx]
            if _command_for_token(report.raw_text[off : starts[idx] + len(tok.token_text)]) == d.command:
                mass = command_distribution(tok.top_alternatives)
                total = sum(mass.values())
                if mass[d.command] > 0.0 and total > 0.0:
                    conf = min(1.0, mass[d.command] / total)
        if conf is None:
            unscored.append(k)
            conf = 1.0
        new_diffs.append(replace(d, confidence=conf))
    return replace(report, differences=tuple(new_diffs), unscored=tuple(unscored))


def _token_at(starts: list[int], offset: int) -> int:
    lo, hi = 0, len(starts) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if starts[mid] <= offset:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _clean_subject(subject: str) -> str:
    return " ".join(subject.split())


def serialize_differences(diffs: Sequence[Difference]) -> str:
    lines = []
    for d in diffs:
        coords = ", ".join(f"{c:.2f}" for c in d.bbox.as_tuple())
        lines.append(f"{d.command.value}: {_clean_subject(d.subject)}, [{coords}]")
    return "\n".join(lines)


def serialize_difference(d: Difference) -> str:
    return serialize_differences([d])
