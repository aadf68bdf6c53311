"""Synthetic series families.

The first five families form the pre-training corpus of the miniature base
model. ``seasonal`` is held out of pre-training and used for adapter
fine-tuning; ``staircase`` is never trained on at all and exercises the
zero-shot protocol. Values are kept small and quantized to at most one
decimal so prompts stay short.

Every series derives its own counter-based stream from (seed, family,
index), so corpus content depends only on the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    SPLIT_LEAVE_ONE_OUT,
    STUDY_COMPARATIVE,
    STUDY_ZERO_SHOT,
    DatasetEntry,
    TimeSeries,
    WindowSpec,
)
from .rng import stream


@dataclass(frozen=True)
class FamilySpec:
    name: str
    window: WindowSpec
    length: int
    study: str = STUDY_COMPARATIVE


FAMILY_SPECS: dict[str, FamilySpec] = {
    "constant": FamilySpec("constant", WindowSpec(8, 4), 16),
    "linear_trend": FamilySpec("linear_trend", WindowSpec(8, 4), 16),
    "sinusoid": FamilySpec("sinusoid", WindowSpec(12, 6), 24),
    "ar1": FamilySpec("ar1", WindowSpec(12, 4), 24),
    "random_walk_drift": FamilySpec("random_walk_drift", WindowSpec(8, 4), 16),
    "seasonal": FamilySpec("seasonal", WindowSpec(12, 4), 24),
    "staircase": FamilySpec("staircase", WindowSpec(12, 4), 24, study=STUDY_ZERO_SHOT),
}

PRETRAIN_FAMILIES = ("constant", "linear_trend", "sinusoid", "ar1", "random_walk_drift")
FINETUNE_FAMILY = "seasonal"
ZERO_SHOT_FAMILY = "staircase"


def registry_entry(family: str) -> DatasetEntry:
    spec = FAMILY_SPECS[family]
    return DatasetEntry(
        name=spec.name,
        spec=spec.window,
        split=SPLIT_LEAVE_ONE_OUT,
        frequency="synthetic",
        study=spec.study,
    )


def _round1(values: np.ndarray) -> np.ndarray:
    return np.round(values, 1)


def _constant(rng, length: int) -> np.ndarray:
    return np.full(length, float(rng.integers(0, 10)))


def _linear_trend(rng, length: int) -> np.ndarray:
    start = float(rng.integers(0, 31))
    slope = float(rng.choice([-2, -1, 1, 2]))
    return start + slope * np.arange(length, dtype=np.float64)


def _sinusoid(rng, length: int) -> np.ndarray:
    period = int(rng.choice([2, 3, 4, 6]))
    amp = float(rng.integers(1, 4))
    level = float(rng.integers(4, 7))
    phase = 2.0 * np.pi * float(rng.integers(0, period)) / period
    t = np.arange(length, dtype=np.float64)
    return _round1(level + amp * np.sin(2.0 * np.pi * t / period + phase))


def _ar1(rng, length: int) -> np.ndarray:
    level = float(rng.uniform(3.0, 7.0))
    rho = float(rng.uniform(0.5, 0.9))
    x = np.empty(length)
    x[0] = level
    for t in range(1, length):
        x[t] = level + rho * (x[t - 1] - level) + rng.normal(0.0, 0.3)
    return _round1(np.clip(x, 0.0, None))


def _random_walk_drift(rng, length: int) -> np.ndarray:
    x = np.empty(length)
    x[0] = float(rng.integers(20, 41))
    drift = float(rng.choice([-0.5, 0.0, 0.5]))
    for t in range(1, length):
        x[t] = x[t - 1] + drift + rng.normal(0.0, 0.5)
    return _round1(np.clip(x, 0.0, None))


def _seasonal(rng, length: int) -> np.ndarray:
    """Exactly periodic integer cycles of period 4 with at least two
    distinct values, so the naive repeat-last forecast is always beatable."""
    period = 4
    while True:
        pattern = rng.integers(0, 10, size=period).astype(np.float64)
        if len(np.unique(pattern)) >= 2:
            break
    reps = int(np.ceil(length / period))
    return np.tile(pattern, reps)[:length]


def _staircase(rng, length: int) -> np.ndarray:
    step = 4
    n_levels = int(np.ceil(length / step))
    levels = rng.integers(0, 10, size=n_levels).astype(np.float64)
    return np.repeat(levels, step)[:length]


_GENERATORS = {
    "constant": _constant,
    "linear_trend": _linear_trend,
    "sinusoid": _sinusoid,
    "ar1": _ar1,
    "random_walk_drift": _random_walk_drift,
    "seasonal": _seasonal,
    "staircase": _staircase,
}


def generate_family(family: str, n_series: int, seed: int,
                    length: int | None = None) -> list[TimeSeries]:
    if family not in _GENERATORS:
        raise KeyError(f"unknown synthetic family {family!r}; known: {sorted(_GENERATORS)}")
    spec = FAMILY_SPECS[family]
    length = length if length is not None else spec.length
    gen = _GENERATORS[family]
    out = []
    for i in range(n_series):
        rng = stream(seed, "synthetic", family, i)
        out.append(TimeSeries(
            series_id=f"{family}-{i:04d}",
            frequency="synthetic",
            values=gen(rng, length),
            source=family,
        ))
    return out
