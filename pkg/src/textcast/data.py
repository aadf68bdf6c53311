"""Series ingestion, anomaly mitigation, sliding-window construction, and
train/test split strategies.

Series files are line-oriented text: ``id<TAB>frequency<TAB>v1,v2,...``.
Window files are TSV rows of (series id, start index, input values, target
values). Both round-trip bit-exactly through repr/float.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np


class SeriesParseError(ValueError):
    """Malformed series or window file; message names the offending line."""


@dataclass
class TimeSeries:
    series_id: str
    frequency: str
    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError(f"series {self.series_id!r} must hold a non-empty 1-D value list")


@dataclass(frozen=True)
class WindowSpec:
    input_size: int
    horizon: int

    def __post_init__(self):
        if self.input_size < 1 or self.horizon < 1:
            raise ValueError("input_size and horizon must be at least 1")


@dataclass
class WindowPair:
    x: np.ndarray
    y: np.ndarray
    series_id: str
    start: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)


SPLIT_LEAVE_ONE_OUT = "leave_one_out"
SPLIT_TAIL_FRACTION = "tail_fraction"
SPLIT_TAIL_COUNT = "tail_count"

STUDY_COMPARATIVE = "comparative"
STUDY_ZERO_SHOT = "zero_shot"


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    spec: WindowSpec
    split: str
    frequency: str
    study: str = STUDY_COMPARATIVE
    split_arg: Optional[float] = None
    n_series: Optional[int] = None


def _entry(name, n, h, split, freq, study=STUDY_COMPARATIVE, split_arg=None, n_series=None):
    return DatasetEntry(name, WindowSpec(n, h), split, freq, study, split_arg, n_series)


# Benchmark datasets: window geometry, split strategy, and which study each
# belongs to. Window files for these must be produced from externally
# obtained series files; the synthetic families below need no downloads.
REGISTRY: dict[str, DatasetEntry] = {e.name: e for e in [
    _entry("electricity", 65, 8, SPLIT_LEAVE_ONE_OUT, "weekly", n_series=321),
    _entry("m1_monthly", 15, 18, SPLIT_LEAVE_ONE_OUT, "monthly", n_series=617),
    _entry("m1_quarterly", 5, 8, SPLIT_LEAVE_ONE_OUT, "quarterly", n_series=203),
    _entry("m3_monthly", 15, 18, SPLIT_LEAVE_ONE_OUT, "monthly", n_series=1428),
    _entry("m3_quarterly", 5, 8, SPLIT_LEAVE_ONE_OUT, "quarterly", n_series=756),
    _entry("nn5_daily", 9, 56, SPLIT_LEAVE_ONE_OUT, "daily", n_series=111),
    _entry("nn5_weekly", 65, 8, SPLIT_LEAVE_ONE_OUT, "weekly", n_series=111),
    _entry("weather", 512, 96, SPLIT_TAIL_FRACTION, "10min", split_arg=0.1, n_series=1),
    _entry("ili", 96, 24, SPLIT_TAIL_FRACTION, "weekly", split_arg=0.2, n_series=1),
    _entry("traffic", 65, 8, SPLIT_LEAVE_ONE_OUT, "weekly",
           study=STUDY_ZERO_SHOT, n_series=862),
    _entry("etth1", 24, 48, SPLIT_TAIL_FRACTION, "hourly",
           study=STUDY_ZERO_SHOT, split_arg=0.1, n_series=1),
    _entry("etth2", 24, 48, SPLIT_TAIL_FRACTION, "hourly",
           study=STUDY_ZERO_SHOT, split_arg=0.1, n_series=1),
]}


# ---------------------------------------------------------------------------
# series file IO
# ---------------------------------------------------------------------------

def save_series(path: str | Path, series: list[TimeSeries]) -> None:
    lines = []
    for s in series:
        values = ",".join(repr(float(v)) for v in s.values)
        lines.append(f"{s.series_id}\t{s.frequency}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_series(path: str | Path, audit: Optional[Callable[[str], None]] = None) -> list[TimeSeries]:
    path = Path(path)
    if audit is not None:
        audit(str(path))
    out: list[TimeSeries] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise SeriesParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        sid, freq, values_s = parts
        values = []
        for j, tok in enumerate(values_s.split(","), start=1):
            tok = tok.strip()
            if not tok:
                raise SeriesParseError(f"{path}:{lineno}: empty value field #{j} in series {sid!r}")
            try:
                values.append(float(tok))
            except ValueError:
                raise SeriesParseError(
                    f"{path}:{lineno}: non-numeric value {tok!r} in series {sid!r}"
                ) from None
        out.append(TimeSeries(sid, freq, np.array(values), source=path.stem))
    return out


# ---------------------------------------------------------------------------
# anomaly mitigation
# ---------------------------------------------------------------------------

def mitigate_anomalies(s: TimeSeries, k: float = 3.0) -> TimeSeries:
    """Clamp values outside median +- k * (1.4826 * MAD) to the boundary.

    MAD is the median absolute deviation about the median; when it collapses
    to zero on a non-constant series, the mean absolute deviation stands in
    so isolated spikes are still caught. Constant series return unchanged.
    Idempotent whenever the deviation median is positive and fewer than half
    the points are clamped.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    v = s.values
    med = float(np.median(v))
    dev = np.abs(v - med)
    mad = float(np.median(dev))
    scale = 1.4826 * (mad if mad > 0 else float(dev.mean()))
    if scale == 0.0:
        return TimeSeries(s.series_id, s.frequency, v.copy(), s.source)
    lo, hi = med - k * scale, med + k * scale
    return TimeSeries(s.series_id, s.frequency, np.clip(v, lo, hi), s.source)


# ---------------------------------------------------------------------------
# windows and splits
# ---------------------------------------------------------------------------

def make_windows(s: TimeSeries, spec: WindowSpec) -> list[WindowPair]:
    """Stride-1 windows: count == len - n - h + 1; short series yield none."""
    n, h = spec.input_size, spec.horizon
    total = s.values.size
    if total < n + h:
        return []
    return [
        WindowPair(s.values[i:i + n].copy(), s.values[i + n:i + n + h].copy(), s.series_id, i)
        for i in range(total - n - h + 1)
    ]


def canonical_order(windows: list[WindowPair]) -> list[WindowPair]:
    return sorted(windows, key=lambda w: (w.series_id, w.start))


def _target_range(w: WindowPair) -> tuple[int, int]:
    lo = w.start + len(w.x)
    return lo, lo + len(w.y)


def split_leave_one_out(windows: list[WindowPair]) -> tuple[list[WindowPair], list[WindowPair]]:
    """Hold out the final window (latest start) of every series; earlier
    windows train, except that any window whose target range intersects the
    held-out target range is dropped (with stride-1 windows those are the
    h-1 windows immediately before the test window). A single-window series
    contributes only a test window."""
    by_series: dict[str, list[WindowPair]] = {}
    for w in windows:
        by_series.setdefault(w.series_id, []).append(w)
    train: list[WindowPair] = []
    test: list[WindowPair] = []
    for sid in sorted(by_series):
        group = sorted(by_series[sid], key=lambda w: w.start)
        if len(group) == 1:
            warnings.warn(f"series {sid!r} has a single window; its train partition is empty")
        held = group[-1]
        test.append(held)
        t_lo, t_hi = _target_range(held)
        for w in group[:-1]:
            y_lo, y_hi = _target_range(w)
            if y_lo < t_hi and t_lo < y_hi:
                continue
            train.append(w)
    return canonical_order(train), canonical_order(test)


def split_tail(
    windows: list[WindowPair],
    fraction: Optional[float] = None,
    count: Optional[int] = None,
    zero_shot: bool = False,
) -> tuple[list[WindowPair], list[WindowPair]]:
    """Chronologically last ceil(fraction*N) windows (or the last ``count``)
    form the test set. Zero-shot mode discards the train partition."""
    if (fraction is None) == (count is None):
        raise ValueError("give exactly one of fraction or count")
    ordered = sorted(windows, key=lambda w: (w.start, w.series_id))
    n = len(ordered)
    if fraction is not None:
        if not 0.0 < fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        n_test = int(np.ceil(fraction * n))
    else:
        n_test = int(count)
    if n_test < 1 or n_test > n:
        raise ValueError(f"test size {n_test} invalid for {n} windows")
    train = [] if zero_shot else canonical_order(ordered[: n - n_test])
    return train, canonical_order(ordered[n - n_test:])


# ---------------------------------------------------------------------------
# window file IO
# ---------------------------------------------------------------------------

def save_windows(path: str | Path, windows: list[WindowPair]) -> None:
    lines = []
    for w in windows:
        xs = ",".join(repr(float(v)) for v in w.x)
        ys = ",".join(repr(float(v)) for v in w.y)
        lines.append(f"{w.series_id}\t{w.start}\t{xs}\t{ys}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_windows(path: str | Path, audit: Optional[Callable[[str], None]] = None) -> list[WindowPair]:
    path = Path(path)
    if audit is not None:
        audit(str(path))
    out: list[WindowPair] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise SeriesParseError(f"{path}:{lineno}: expected 4 tab-separated fields")
        sid, start_s, xs, ys = parts
        try:
            x = [float(t) for t in xs.split(",")]
            y = [float(t) for t in ys.split(",")]
            start = int(start_s)
        except ValueError:
            raise SeriesParseError(f"{path}:{lineno}: malformed window row") from None
        out.append(WindowPair(np.array(x), np.array(y), sid, start))
    return out


def save_window_manifest(path: str | Path, windows: list[WindowPair], spec: WindowSpec,
                         split_tag: str) -> None:
    """Audit listing: one line per window (series id, start, n, h, split)."""
    lines = [
        f"{w.series_id}\t{w.start}\t{spec.input_size}\t{spec.horizon}\t{split_tag}"
        for w in windows
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
