"""Descriptive analysis of a block trace: interval means, summary statistics,
cross-correlations and autocorrelation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DataError
from .ingest import WEI_PER_GWEI, BlockRecord

PRICE_FIELDS = ("avg_gas_price", "max_gas_price", "min_gas_price")
BLOCK_FIELDS = PRICE_FIELDS + ("tx_count", "gas_utilization", "gas_used", "gas_limit")

# variables of the per-block correlation matrix, in display order
CORRELATION_FIELDS = (
    "avg_gas_price",
    "max_gas_price",
    "min_gas_price",
    "tx_count",
    "gas_utilization",
)


@dataclass(frozen=True)
class IntervalSeries:
    interval_seconds: int
    starts: tuple[int, ...]
    values: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.values)

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.starts, self.values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Pearson coefficients; undefined entries (zero variance) are NaN."""

    labels: tuple[str, ...]
    values: np.ndarray

    def __getitem__(self, key: tuple[str, str]) -> float:
        a, b = key
        return float(self.values[self.labels.index(a), self.labels.index(b)])


def block_value(block: BlockRecord, field: str) -> float | None:
    """Per-block variable; prices in Gwei, ``None`` for empty blocks."""
    if field not in BLOCK_FIELDS:
        raise ArgumentError(f"unknown block field {field!r}; choose from {BLOCK_FIELDS}")
    if field in PRICE_FIELDS:
        wei = getattr(block, field)
        return None if wei is None else wei / WEI_PER_GWEI
    if field == "gas_utilization":
        return block.gas_utilization
    return float(getattr(block, field))


def block_values(trace: Iterable[BlockRecord], field: str) -> np.ndarray:
    """Values of ``field`` over blocks where it is defined."""
    vals = [block_value(b, field) for b in trace]
    return np.array([v for v in vals if v is not None], dtype=float)


def aggregate_interval(
    trace: Sequence[BlockRecord], field: str, interval_seconds: int
) -> IntervalSeries:
    """Mean of ``field`` over epoch-aligned windows ``[start, start + interval)``.

    Windows with no contributing block (or only empty blocks for a price
    field) are left out of the series.
    """
    if interval_seconds <= 0:
        raise ArgumentError("interval_seconds must be positive")
    if len(trace) == 0:
        raise ArgumentError("trace is empty")
    if field not in BLOCK_FIELDS:
        raise ArgumentError(f"unknown block field {field!r}; choose from {BLOCK_FIELDS}")
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for b in trace:
        v = block_value(b, field)
        if v is None:
            continue
        start = b.timestamp - b.timestamp % interval_seconds
        sums[start] = sums.get(start, 0.0) + v
        counts[start] = counts.get(start, 0) + 1
    starts = tuple(sorted(sums))
    values = tuple(sums[s] / counts[s] for s in starts)
    return IntervalSeries(interval_seconds, starts, values)


def descriptive_stats(values) -> dict[str, float]:
    """Mean, median and sample (n-1) standard deviation."""
    x = values.as_array() if isinstance(values, IntervalSeries) else np.asarray(values, float)
    if x.size < 2:
        raise ArgumentError("need at least two values for a standard deviation")
    return {
        "mean": float(x.mean()),
        "median": float(np.median(x)),
        "std": float(x.std(ddof=1)),
    }


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        return math.nan
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def correlation_matrix(
    trace: Sequence[BlockRecord], fields: Sequence[str] = CORRELATION_FIELDS
) -> CorrelationMatrix:
    """Pairwise-complete Pearson correlation of per-block variables."""
    if sum(1 for b in trace if b.has_prices) < 2:
        raise ArgumentError("need at least two blocks with prices")
    cols = []
    for f in fields:
        vals = [block_value(b, f) for b in trace]
        cols.append(np.array([math.nan if v is None else v for v in vals], dtype=float))
    k = len(fields)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            ok = ~(np.isnan(cols[i]) | np.isnan(cols[j]))
            out[i, j] = out[j, i] = _pearson(cols[i][ok], cols[j][ok])
    return CorrelationMatrix(tuple(fields), out)


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """Sample ACF for lags ``0..max_lag`` (biased estimator, ACF(0) = 1)."""
    x = series.as_array() if isinstance(series, IntervalSeries) else np.asarray(series, float)
    n = x.size
    if max_lag < 0 or max_lag >= n:
        raise ArgumentError(f"max_lag must lie in [0, {n - 1}], got {max_lag}")
    d = x - x.mean()
    denom = float(d @ d)
    if denom == 0.0:
        raise DataError("autocorrelation of a constant series is undefined")
    acf = np.empty(max_lag + 1)
    acf[0] = 1.0
    for k in range(1, max_lag + 1):
        acf[k] = float(d[:-k] @ d[k:]) / denom
    return acf
