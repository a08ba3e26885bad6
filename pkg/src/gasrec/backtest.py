"""Replay a block trace and measure what each pricing strategy pays and how
long its transactions wait.

One transaction is submitted per block at the strategy's price. A pending
transaction is included by the first later block whose minimum gas price
does not exceed its price; blocks without transactions accept anything.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, DataError
from .features import NormalizationParams, PipelineConfig, denormalize, inference_arrays, smooth_window
from .forecast import GruModel, predict
from .ingest import BlockTrace, EthPricePoint
from .recommend import (
    EXPRESS_LOOKBACK,
    GETH_LOOKBACK,
    Constant,
    Express,
    Geth,
    LookAhead,
    Proposed,
    Recommendation,
    SlopeNormalizer,
    Strategy,
    recommend_express,
    recommend_from_forecast,
    recommend_geth,
    recommend_lookahead,
)

RESULTS_HEADER = ("strategy", "parameter", "n_submitted", "n_included", "avg_price_wei", "avg_blocks_waited")


@dataclass(frozen=True, order=True)
class PendingTx:
    price: int  # wei; first so sorting puts the cheapest first
    submit_block: int

    def __post_init__(self):
        if self.price < 1:
            raise ArgumentError("transaction price must be at least 1 wei")


@dataclass(frozen=True)
class InclusionRecord:
    submit_block: int
    recommended_price: int
    inclusion_block: int | None = None
    inclusion_price: int | None = None
    blocks_waited: int | None = None

    @property
    def included(self) -> bool:
        return self.inclusion_block is not None


@dataclass(frozen=True)
class BacktestSummary:
    strategy: str
    parameter: str
    n_submitted: int
    n_included: int
    avg_recommended_price: int  # wei, floor of the mean
    avg_blocks_waited: float | None  # over included transactions only

    def row(self) -> list[str]:
        wait = "" if self.avg_blocks_waited is None else f"{self.avg_blocks_waited:.6f}"
        return [
            self.strategy,
            self.parameter,
            str(self.n_submitted),
            str(self.n_included),
            str(self.avg_recommended_price),
            wait,
        ]


def effective_min_price(trace: BlockTrace, number: int) -> int:
    """Block minimum gas price; empty blocks count as 0."""
    price = trace.block(number).min_gas_price
    return 0 if price is None else price


def evaluate_recommender(
    trace: BlockTrace,
    start_block: int,
    end_block: int,
    last_block: int,
    recommend: Callable[[int], int],
) -> list[InclusionRecord]:
    """Submit one transaction per block in ``[start_block, end_block]`` and
    process blocks up to ``last_block`` while any remain pending.

    At each block, pending transactions priced at or above the block minimum
    are included cheapest first; then the block's own transaction is
    submitted. Transactions still pending after ``last_block`` come back
    with empty inclusion fields. Records are ordered by submit block.
    """
    if not start_block <= end_block <= last_block:
        raise ArgumentError(f"need start <= end <= last, got {start_block}, {end_block}, {last_block}")
    if len(trace) == 0 or start_block < trace.first_number or last_block > trace.last_number:
        raise ArgumentError(f"trace does not cover blocks {start_block}..{last_block}")
    pending: list[PendingTx] = []  # kept sorted, cheapest first
    results: dict[int, InclusionRecord] = {}
    block = start_block
    while block <= end_block or (pending and block <= last_block):
        price = effective_min_price(trace, block)
        # everything priced at or above the block minimum gets in, drained
        # cheapest first; a cheap straggler does not block dearer ones
        cut = bisect.bisect_left(pending, price, key=lambda t: t.price)
        for tx in pending[cut:]:
            results[tx.submit_block] = InclusionRecord(
                tx.submit_block, tx.price, block, price, block - tx.submit_block
            )
        del pending[cut:]
        if block <= end_block:
            bisect.insort(pending, PendingTx(int(recommend(block)), block))
        block += 1
    for tx in pending:
        results[tx.submit_block] = InclusionRecord(tx.submit_block, tx.price)
    return [results[b] for b in sorted(results)]


def summarize(records: Sequence[InclusionRecord], strategy: str = "", parameter: str = "") -> BacktestSummary:
    if not records:
        raise ArgumentError("no records to summarize")
    included = [r for r in records if r.included]
    avg_price = sum(r.recommended_price for r in records) // len(records)
    avg_wait = sum(r.blocks_waited for r in included) / len(included) if included else None
    return BacktestSummary(strategy, parameter, len(records), len(included), avg_price, avg_wait)


# -- recommenders ----------------------------------------------------------------------


class ProposedForecaster:
    """Forecasts for the proposed strategy, built once per trace.

    The forecast used at block ``B`` comes from the latest ``l`` completed
    steps, i.e. steps whose end is no later than ``B``'s timestamp.
    Forecasts are cached per window, so urgency sweeps reuse them.
    """

    def __init__(
        self,
        model: GruModel,
        normalizer: NormalizationParams,
        slope_normalizer: SlopeNormalizer,
        config: PipelineConfig,
        trace: BlockTrace,
        eth_prices: Sequence[EthPricePoint],
    ):
        self.model = model
        self.normalizer = normalizer
        self.slope_normalizer = slope_normalizer
        self.config = config
        self.trace = trace
        self.features, self.step_index, self.step_end = inference_arrays(
            trace, eth_prices, config, normalizer
        )
        self._forecasts: dict[int, np.ndarray] = {}

    def window_end(self, block: int) -> int:
        ts = self.trace.block(block).timestamp
        pos = bisect.bisect_right(self.step_end, ts) - 1
        if pos + 1 < self.config.window_length:
            raise ArgumentError(
                f"block {block}: fewer than {self.config.window_length} completed steps of history"
            )
        return pos

    def _window(self, pos: int) -> np.ndarray:
        l = self.config.window_length
        return smooth_window(self.features[pos - l + 1 : pos + 1], self.config)

    def prepare(self, blocks: Sequence[int]) -> None:
        """Batch the forecasts for all windows used by ``blocks``."""
        todo = sorted({self.window_end(b) for b in blocks} - self._forecasts.keys())
        if not todo:
            return
        batch = np.stack([self._window(p) for p in todo])
        preds = denormalize(predict(self.model, batch), self.normalizer)
        self._forecasts.update(zip(todo, preds))

    def forecast(self, block: int) -> np.ndarray:
        pos = self.window_end(block)
        if pos not in self._forecasts:
            self.prepare([block])
        return self._forecasts[pos]

    def recommendation(self, block: int, urgency: float) -> Recommendation:
        return recommend_from_forecast(self.forecast(block), self.slope_normalizer, urgency)


def make_recommender(
    strategy: Strategy, trace: BlockTrace, forecaster: ProposedForecaster | None = None
) -> Callable[[int], int]:
    """A ``block -> price in wei`` function for ``strategy`` on ``trace``."""
    mins = [b.min_gas_price for b in trace]

    def history(block: int, depth: int) -> list[int | None]:
        i = trace.index_of(block)
        return mins[max(0, i - depth + 1) : i + 1]

    if isinstance(strategy, Constant):
        return lambda block: strategy.price_wei
    if isinstance(strategy, Geth):
        def geth(block: int) -> int:
            try:
                return recommend_geth(history(block, GETH_LOOKBACK), strategy.scale)
            except DataError as exc:
                raise ArgumentError(f"block {block}: {exc}") from None
        return geth
    if isinstance(strategy, Express):
        def express(block: int) -> int:
            try:
                return recommend_express(history(block, EXPRESS_LOOKBACK), strategy.tier)
            except DataError as exc:
                raise ArgumentError(f"block {block}: {exc}") from None
        return express
    if isinstance(strategy, LookAhead):
        def lookahead(block: int) -> int:
            i = trace.index_of(block)
            future = mins[i + 1 : i + 1 + strategy.blocks]
            if len(future) < strategy.blocks:
                raise ArgumentError(f"block {block}: needs {strategy.blocks} future blocks in the trace")
            try:
                return recommend_lookahead(future, strategy.blocks)
            except DataError as exc:
                raise ArgumentError(f"block {block}: {exc}") from None
        return lookahead
    if isinstance(strategy, Proposed):
        if forecaster is None:
            raise ArgumentError("the proposed strategy needs a trained model")
        return lambda block: forecaster.recommendation(block, strategy.urgency).price_wei
    raise ArgumentError(f"unsupported strategy {strategy!r}")


def run_strategy(
    trace: BlockTrace,
    start: int,
    end: int,
    last: int,
    strategy: Strategy,
    forecaster: ProposedForecaster | None = None,
) -> list[InclusionRecord]:
    if isinstance(strategy, Proposed) and forecaster is not None:
        forecaster.prepare(range(start, end + 1))
    return evaluate_recommender(trace, start, end, last, make_recommender(strategy, trace, forecaster))


def compare(
    trace: BlockTrace,
    start: int,
    end: int,
    last: int,
    strategies: Sequence[Strategy],
    forecaster: ProposedForecaster | None = None,
) -> list[BacktestSummary]:
    """One summary per strategy over the same block range."""
    return [
        summarize(run_strategy(trace, start, end, last, s, forecaster), s.name, s.parameter)
        for s in strategies
    ]


def write_results_csv(summaries: Sequence[BacktestSummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for s in summaries:
            writer.writerow(s.row())
