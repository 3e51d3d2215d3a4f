"""Metrics and machine-readable run reports.

A run directory holds ``report.json`` (config echo, final error, table rows),
``cumulative_error.csv`` (the running error curve) and ``timing.json``.
Wall time is kept out of ``report.json`` so that the report itself is
byte-identical across reruns with the same seed and config.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SttrConfig
from .engine import PredictionLog, ProtocolResult, run_protocol
from .errors import ReportError

REPORT_VERSION = 1
MAX_SERIES_POINTS = 1000


def cumulative_error(log: PredictionLog) -> np.ndarray:
    """Running error (%) after each arrival: ``e_n = 100 * mistakes_n / n``."""
    labels = log.labels()
    if labels is None:
        raise ReportError("cumulative error needs true labels for every record")
    if len(log) == 0:
        raise ReportError("cumulative error of an empty log")
    wrong = (log.predictions() != labels).astype(np.float64)
    return np.cumsum(wrong) / np.arange(1, len(wrong) + 1) * 100.0


def downsample(series: np.ndarray, max_points: int = MAX_SERIES_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced (index, value) pairs, always keeping the last point.

    Indices are 1-based arrival counts.
    """
    n = len(series)
    if n <= max_points:
        idx = np.arange(n)
    else:
        idx = np.unique(np.linspace(0, n - 1, max_points).round().astype(np.int64))
    return idx + 1, series[idx]


def per_sample_time(wall_time: float, n_samples: int) -> float:
    if n_samples <= 0:
        raise ReportError("per-sample time of a zero-length stream is undefined")
    return wall_time / n_samples


def timing_report(result: ProtocolResult) -> dict:
    return {
        "wall_time_s": result.wall_time,
        "n_samples": result.n_samples,
        "per_sample_s": per_sample_time(result.wall_time, result.n_samples),
    }


@dataclass
class RunReport:
    config: dict
    seed: int
    final_error: float
    series: np.ndarray
    table: list[dict] = field(default_factory=list)
    per_sample_time: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.final_error <= 100.0:
            raise ReportError(f"final error {self.final_error} outside [0, 100]")
        if len(self.series) and self.series[-1] != self.final_error:
            raise ReportError("final error must equal the last cumulative value")

    @classmethod
    def from_result(cls, result: ProtocolResult, config: SttrConfig, *, table=None, extras=None) -> "RunReport":
        series = cumulative_error(result.log)
        return cls(
            config=config.to_dict(),
            seed=config.seed,
            final_error=float(series[-1]),
            series=series,
            table=list(table or []),
            per_sample_time=per_sample_time(result.wall_time, result.n_samples),
            extras=dict(extras or {}),
        )

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "seed": self.seed,
            "config": self.config,
            "extras": self.extras,
            "final_error": self.final_error,
            "n_samples": int(len(self.series)),
            "table": self.table,
        }

    def series_csv(self) -> str:
        idx, values = downsample(self.series)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "cumulative_error"])
        for i, v in zip(idx, values):
            w.writerow([int(i), repr(float(v))])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "cumulative_error.csv").write_text(self.series_csv())
        if self.per_sample_time is not None:
            timing = {"per_sample_s": self.per_sample_time, "n_samples": int(len(self.series))}
            (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
        return out / "report.json"


def order_robustness(model, anchors, x, y, config: SttrConfig, n_shuffles: int, *, seed: int = 0) -> dict:
    """Final error over ``n_shuffles`` random stream orders.

    Shuffle ``i`` uses the permutation drawn from ``default_rng([seed, i])``.
    """
    if n_shuffles < 2:
        raise ReportError("order robustness needs at least two shuffles")
    errors = []
    for i in range(n_shuffles):
        order = np.random.default_rng([seed, i]).permutation(len(x))
        errors.append(run_protocol(model, anchors, x, y, config, order=order).final_error)
    errors = np.array(errors)
    return {"errors": errors.tolist(), "mean": float(errors.mean()), "std": float(errors.std())}


def table_row(family: str, severity: int, test_error: float, ttac_error: float) -> dict:
    return {
        "corruption": family,
        "severity": int(severity),
        "test_error": float(test_error),
        "ttac_error": float(ttac_error),
    }


def format_table(rows: list[dict]) -> str:
    """Plain-text rendering of per-corruption rows."""
    lines = [f"{'corruption':<16}{'sev':>4}{'TEST':>9}{'TTAC':>9}"]
    for r in rows:
        lines.append(f"{r['corruption']:<16}{r['severity']:>4}{r['test_error']:>9.2f}{r['ttac_error']:>9.2f}")
    return "\n".join(lines)
