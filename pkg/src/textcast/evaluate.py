"""Forecast evaluation: batch prediction over windows, error metrics, the
missing-rate accounting, the persistence yardstick, and report files.

RMSE and SMAPE are computed per window and averaged over decoded windows
only; instances whose output could not be decoded to the full horizon are
excluded from the error metrics and surface in the missing rate instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .codec import (
    DECODED_STATUSES,
    STATUS_EXACT,
    STATUSES,
    ForecastResult,
    parse_output,
)
from .data import WindowPair
from .model import DecoderWeights, GenerationConfig, generate
from .rng import stream
from .tokenizer import EOS_ID, Vocabulary
from .train import generation_prompt_ids


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"rmse needs equal non-empty lengths, got {y.shape} vs {y_hat.shape}")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def smape(y, y_hat) -> float:
    """(2/n) * sum |y - y_hat| / (|y| + |y_hat|), in [0, 2]. Terms where
    both values are zero contribute 0 (perfect agreement)."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"smape needs equal non-empty lengths, got {y.shape} vs {y_hat.shape}")
    num = np.abs(y - y_hat)
    den = np.abs(y) + np.abs(y_hat)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(2.0 * terms.mean())


def missing_rate(n_test: int, n_decoded: int) -> float:
    if n_test <= 0:
        raise ValueError("n_test must be positive")
    if not 0 <= n_decoded <= n_test:
        raise ValueError("n_decoded must lie in [0, n_test]")
    return 100.0 * (n_test - n_decoded) / n_test


def persistence_baseline(w: WindowPair) -> np.ndarray:
    """Repeat the last observed lag across the horizon."""
    return np.full(len(w.y), float(w.x[-1]))


def predict_batch(
    weights: DecoderWeights,
    windows: list[WindowPair],
    gen: GenerationConfig,
    vocab: Vocabulary,
    horizon_pad: bool = True,
) -> list[ForecastResult]:
    """Render, generate, parse, classify: one ForecastResult per window.

    ``horizon_pad`` asks the model for h+1 values and trims back to h, the
    mitigation for early stopping. Each window draws its own stream from
    (seed, series id, start), so worker layout never changes outputs.
    """
    results: list[ForecastResult] = []
    for w in windows:
        h = len(w.y)
        ask = h + 1 if horizon_pad else h
        prompt_ids = generation_prompt_ids(w.x, ask, vocab)
        rng = stream(gen.seed, "predict", w.series_id, int(w.start))
        out_ids = generate(weights, prompt_ids, gen, eos_id=EOS_ID, rng=rng)
        text = vocab.decode(prompt_ids + out_ids)
        results.append(parse_output(text, h))
    return results


@dataclass
class DatasetMetrics:
    name: str
    n_test: int
    n_decoded: int
    rmse: float
    smape: float
    missing_rate: float
    status_counts: dict[str, int] = field(default_factory=dict)


@dataclass
class MetricsReport:
    datasets: list[DatasetMetrics]
    avg_rmse: float
    avg_smape: float
    avg_missing_rate: float


def score_dataset(name: str, windows: list[WindowPair],
                  results: list[ForecastResult]) -> DatasetMetrics:
    if len(windows) != len(results):
        raise ValueError("windows and results must align")
    counts = {s: 0 for s in STATUSES}
    rmses: list[float] = []
    smapes: list[float] = []
    for w, r in zip(windows, results):
        counts[r.status] += 1
        if r.status in DECODED_STATUSES:
            rmses.append(rmse(w.y, r.values))
            smapes.append(smape(w.y, r.values))
    n_test = len(windows)
    n_decoded = sum(counts[s] for s in DECODED_STATUSES)
    return DatasetMetrics(
        name=name,
        n_test=n_test,
        n_decoded=n_decoded,
        rmse=float(np.mean(rmses)) if rmses else math.nan,
        smape=float(np.mean(smapes)) if smapes else math.nan,
        missing_rate=missing_rate(n_test, n_decoded),
        status_counts=counts,
    )


def report(per_dataset: list[DatasetMetrics],
           out_dir: Optional[str | Path] = None,
           audits: Optional[dict[str, list[tuple[WindowPair, ForecastResult]]]] = None,
           ) -> MetricsReport:
    """Aggregate per-dataset rows into an average-of-averages summary and
    optionally write the report and audit files."""
    if not per_dataset:
        raise ValueError("report needs at least one dataset result")
    rep = MetricsReport(
        datasets=list(per_dataset),
        avg_rmse=float(np.mean([d.rmse for d in per_dataset])),
        avg_smape=float(np.mean([d.smape for d in per_dataset])),
        avg_missing_rate=float(np.mean([d.missing_rate for d in per_dataset])),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        header = "dataset\tn_test\tn_decoded\trmse\tsmape\tmissing_rate_pct\t" + \
            "\t".join(f"n_{s}" for s in STATUSES)
        lines = [header]
        for d in per_dataset:
            lines.append(
                f"{d.name}\t{d.n_test}\t{d.n_decoded}\t{d.rmse:.6f}\t{d.smape:.6f}\t"
                f"{d.missing_rate:.6f}\t" + "\t".join(str(d.status_counts[s]) for s in STATUSES)
            )
        lines.append(
            f"avg_of_avgs\t-\t-\t{rep.avg_rmse:.6f}\t{rep.avg_smape:.6f}\t"
            f"{rep.avg_missing_rate:.6f}\t" + "\t".join("-" for _ in STATUSES)
        )
        lines.append("# error metrics cover decoded (exact or trimmed) instances only")
        (out_dir / "metrics.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

        if audits:
            # every non-exact instance, with the raw model text; the
            # anomalous/unparseable rows are the metric-excluded ones
            audit_lines = ["dataset\tseries_id\tstart\tstatus\traw_text"]
            for name, rows in audits.items():
                for w, r in rows:
                    if r.status == STATUS_EXACT:
                        continue
                    raw = r.raw_text.replace("\t", " ").replace("\n", " ")
                    audit_lines.append(f"{name}\t{w.series_id}\t{w.start}\t{r.status}\t{raw}")
            (out_dir / "audit.tsv").write_text("\n".join(audit_lines) + "\n", encoding="utf-8")
    return rep


def forecast_rows(windows: list[WindowPair], results: list[ForecastResult]) -> list[str]:
    """Plot-ready delimited rows: horizon step, truth, forecast."""
    rows = ["series_id\tstart\tstep\ttruth\tforecast"]
    for w, r in zip(windows, results):
        if r.status not in DECODED_STATUSES:
            continue
        for step, (t, f) in enumerate(zip(w.y, r.values), start=1):
            rows.append(f"{w.series_id}\t{w.start}\t{step}\t{float(t)!r}\t{float(f)!r}")
    return rows
