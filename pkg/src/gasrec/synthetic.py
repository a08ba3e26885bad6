"""Deterministic synthetic block traces for tests, demos and the bundled
fixture. Nothing here is used on real data."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .ingest import WEI_PER_GWEI, BlockRecord, BlockTrace, EthPricePoint

# 2019-11-10 00:00:00 UTC
DEFAULT_START_TS = 1_573_344_000
DEFAULT_START_BLOCK = 8_900_000
GAS_LIMIT = 10_000_000


def sine_level(base: float, amplitude: float, period_seconds: float, phase: float = 0.0):
    """Gwei level following ``base + amplitude * sin(2 pi t / period)``."""
    return lambda ts: base + amplitude * math.sin(2 * math.pi * ts / period_seconds + phase)


def regime_level(low: float, high: float, period_seconds: float, ramp_seconds: float = 3600.0):
    """Alternating cheap/expensive regimes, each lasting half a period, joined
    by linear ramps of ``ramp_seconds``."""

    def level(ts: float) -> float:
        u = ts % period_seconds
        half = period_seconds / 2
        if u < ramp_seconds:
            return low + (high - low) * u / ramp_seconds
        if u < half:
            return high
        if u < half + ramp_seconds:
            return high - (high - low) * (u - half) / ramp_seconds
        return low

    return level


def synthetic_trace(
    n_blocks: int,
    level: Callable[[float], float],
    *,
    block_seconds: int = 15,
    start_ts: int = DEFAULT_START_TS,
    start_block: int = DEFAULT_START_BLOCK,
    noise_sigma: float = 0.0,
    cheap_fraction: float = 0.0,
    cheap_gwei: float = 1.0,
    empty_fraction: float = 0.0,
    seed: int = 0,
) -> BlockTrace:
    """Blocks whose minimum gas price follows ``level(ts)`` in Gwei.

    ``noise_sigma`` applies multiplicative log-normal noise per block. A
    ``cheap_fraction`` of blocks carries a ``cheap_gwei`` transaction, and an
    ``empty_fraction`` carries none. Max and average prices are fixed
    multiples of the minimum.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n_blocks)
    cheap = rng.random(n_blocks) < cheap_fraction
    empty = rng.random(n_blocks) < empty_fraction
    blocks = []
    for i in range(n_blocks):
        ts = start_ts + i * block_seconds
        number = start_block + i
        tx_count = int(round(120 + 40 * math.sin(2 * math.pi * ts / 86400 + 1.0)))
        if empty[i]:
            blocks.append(BlockRecord(number, ts, None, None, None, 0, 0, GAS_LIMIT))
            continue
        gwei = level(ts) * math.exp(noise_sigma * noise[i])
        if cheap[i]:
            gwei = min(gwei, cheap_gwei)
        lo = max(1, int(round(gwei * WEI_PER_GWEI)))
        hi = lo * 3 + 2 * WEI_PER_GWEI
        avg = lo + (hi - lo) // 4
        gas_used = min(GAS_LIMIT, tx_count * 63_000)
        blocks.append(BlockRecord(number, ts, lo, hi, avg, tx_count, gas_used, GAS_LIMIT))
    return BlockTrace(blocks)


def synthetic_eth_prices(start_ts: int, end_ts: int, interval: int = 3600) -> list[EthPricePoint]:
    """Hourly ETH/USD points starting a day before ``start_ts``."""
    first = (start_ts // 86400 - 1) * 86400
    points = []
    for ts in range(first, end_ts + interval, interval):
        usd = 180.0 + 15.0 * math.sin(2 * math.pi * ts / (5 * 86400)) + 3.0 * math.cos(ts / 7200.0)
        points.append(EthPricePoint(ts, round(usd, 4)))
    return points
