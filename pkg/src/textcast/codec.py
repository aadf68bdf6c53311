"""Numeric window <-> text prompt codec.

Renders input lags into the fixed context/question template, renders target
values into the comma-separated answer form, and parses free model text back
into a forecast with an explicit decode status. The statuses drive the
missing-rate accounting downstream: only ``exact`` and ``trimmed`` results
count as decoded.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

PROMPT_TEMPLATE = (
    "The last {n} observations of an unknown variable were {series}. "
    "What will the next {h} observations be? Response:"
)

# Single space between "Response:" and the first answer character, both in
# training samples and in generation prompts.
ANSWER_SEPARATOR = " "

VALUE_SEPARATOR = ", "

DEFAULT_PRECISION = 4

STATUS_EXACT = "exact"
STATUS_TRIMMED = "trimmed"
STATUS_ANOMALOUS_SHORT = "anomalous_short"
STATUS_UNPARSEABLE = "unparseable"
STATUSES = (STATUS_EXACT, STATUS_TRIMMED, STATUS_ANOMALOUS_SHORT, STATUS_UNPARSEABLE)

DECODED_STATUSES = (STATUS_EXACT, STATUS_TRIMMED)

_NUMBER_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)")
_ANCHOR = "Response:"


@dataclass
class ForecastResult:
    values: list[float]
    status: str
    raw_text: str = ""

    @property
    def decoded(self) -> bool:
        return self.status in DECODED_STATUSES


def format_number(v: float, precision: int = DEFAULT_PRECISION) -> str:
    """Fixed-precision decimal, trailing zeros trimmed, integers without a
    decimal point. -0 normalizes to 0."""
    if not math.isfinite(v):
        raise ValueError(f"cannot format non-finite value {v!r}")
    text = f"{v:.{precision}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if text in ("-0", ""):
        text = "0"
    return text


def render_series(values, precision: int = DEFAULT_PRECISION) -> str:
    return VALUE_SEPARATOR.join(format_number(v, precision) for v in values)


def render_prompt(lags, h: int, precision: int = DEFAULT_PRECISION) -> str:
    lags = list(lags)
    if not lags:
        raise ValueError("prompt needs at least one input lag")
    if h < 1:
        raise ValueError("forecast horizon must be at least 1")
    return PROMPT_TEMPLATE.format(n=len(lags), series=render_series(lags, precision), h=h)


def render_answer(targets, precision: int = DEFAULT_PRECISION) -> str:
    targets = list(targets)
    if not targets:
        raise ValueError("answer needs at least one target value")
    return render_series(targets, precision)


def parse_output(raw: str, h: int) -> ForecastResult:
    """Extract the maximal leading run of numbers after the last "Response:"
    anchor (or from the start when no anchor is present) and classify it
    against the expected horizon h.

    More than h numbers -> first h, trimmed; fewer -> anomalous_short;
    no leading number at all -> unparseable.
    """
    if h < 1:
        raise ValueError("forecast horizon must be at least 1")
    text = raw
    idx = text.rfind(_ANCHOR)
    if idx >= 0:
        text = text[idx + len(_ANCHOR):]

    values: list[float] = []
    n = len(text)
    pos = 0
    while pos < n and text[pos].isspace():
        pos += 1
    while pos < n:
        m = _NUMBER_RE.match(text, pos)
        if m is None:
            break
        values.append(float(m.group()))
        pos = m.end()
        # between numbers: optional spaces, at most one comma, optional
        # spaces, and at least one separator character, so glued tokens
        # like "4.5.6" terminate the run instead of splitting oddly
        sep_start = pos
        while pos < n and text[pos].isspace():
            pos += 1
        if pos < n and text[pos] == ",":
            pos += 1
            while pos < n and text[pos].isspace():
                pos += 1
        if pos == sep_start:
            break

    if not values:
        return ForecastResult([], STATUS_UNPARSEABLE, raw)
    if len(values) > h:
        return ForecastResult(values[:h], STATUS_TRIMMED, raw)
    if len(values) < h:
        return ForecastResult(values, STATUS_ANOMALOUS_SHORT, raw)
    return ForecastResult(values, STATUS_EXACT, raw)
