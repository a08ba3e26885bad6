"""Block data ingestion: JSON-RPC fetching, ETH/USD price joining, and the
canonical block-trace CSV format.

All gas prices are kept as Python ``int`` wei values in this module. The
conversion to floating-point Gwei happens later, in :mod:`gasrec.features`.
"""

from __future__ import annotations

import bisect
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import httpx

from .errors import ArgumentError, DataError, ParseError, TransportError

logger = logging.getLogger(__name__)

WEI_PER_GWEI = 10**9

TRACE_HEADER = (
    "number",
    "timestamp",
    "min_gas_price_wei",
    "max_gas_price_wei",
    "avg_gas_price_wei",
    "tx_count",
    "gas_used",
    "gas_limit",
)
PRICE_HEADER = ("timestamp", "usd_price")


@dataclass(frozen=True)
class BlockRecord:
    """Gas-price statistics of one mined block.

    Price fields are ``None`` exactly when the block carries no transactions.
    ``avg_gas_price`` is the unweighted mean over the block's transactions,
    rounded down to whole wei.
    """

    number: int
    timestamp: int
    min_gas_price: int | None
    max_gas_price: int | None
    avg_gas_price: int | None
    tx_count: int
    gas_used: int
    gas_limit: int

    def __post_init__(self):
        if self.number < 0:
            raise DataError(f"block {self.number}: negative height")
        if self.tx_count < 0:
            raise DataError(f"block {self.number}: negative tx_count")
        if self.gas_used < 0 or self.gas_limit < 0:
            raise DataError(f"block {self.number}: negative gas")
        if self.gas_used > self.gas_limit:
            raise DataError(f"block {self.number}: gas_used exceeds gas_limit")
        prices = (self.min_gas_price, self.max_gas_price, self.avg_gas_price)
        if self.tx_count == 0:
            if any(p is not None for p in prices):
                raise DataError(f"block {self.number}: empty block with prices")
            return
        if any(p is None for p in prices):
            raise DataError(f"block {self.number}: missing prices for non-empty block")
        if self.min_gas_price < 0:
            raise DataError(f"block {self.number}: negative gas price")
        if not self.min_gas_price <= self.avg_gas_price <= self.max_gas_price:
            raise DataError(f"block {self.number}: expected min <= avg <= max gas price")

    @property
    def has_prices(self) -> bool:
        return self.tx_count > 0

    @property
    def gas_utilization(self) -> float:
        return self.gas_used / self.gas_limit if self.gas_limit else 0.0

    @classmethod
    def from_gas_prices(
        cls,
        number: int,
        timestamp: int,
        gas_prices: Sequence[int],
        gas_used: int,
        gas_limit: int,
    ) -> "BlockRecord":
        if gas_prices:
            lo, hi = min(gas_prices), max(gas_prices)
            avg = sum(gas_prices) // len(gas_prices)
        else:
            lo = hi = avg = None
        return cls(number, timestamp, lo, hi, avg, len(gas_prices), gas_used, gas_limit)


@dataclass(frozen=True)
class EthPricePoint:
    timestamp: int
    usd_price: float

    def __post_init__(self):
        if not self.usd_price > 0:
            raise DataError(f"non-positive ETH price at {self.timestamp}")


class BlockTrace(Sequence[BlockRecord]):
    """An immutable run of blocks with strictly consecutive heights."""

    def __init__(self, blocks: Iterable[BlockRecord]):
        self._blocks = tuple(blocks)
        for prev, cur in zip(self._blocks, self._blocks[1:]):
            if cur.number != prev.number + 1:
                raise DataError(
                    f"non-contiguous heights: block {cur.number} follows {prev.number}"
                )
            if cur.timestamp < prev.timestamp:
                raise DataError(f"block {cur.number}: timestamp decreases")

    def __getitem__(self, index):
        if isinstance(index, slice):
            return BlockTrace(self._blocks[index])
        return self._blocks[index]

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self) -> Iterator[BlockRecord]:
        return iter(self._blocks)

    def __eq__(self, other) -> bool:
        if isinstance(other, BlockTrace):
            return self._blocks == other._blocks
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._blocks)

    def __repr__(self) -> str:
        if not self._blocks:
            return "BlockTrace([])"
        return f"BlockTrace({self.first_number}..{self.last_number}, n={len(self)})"

    @property
    def first_number(self) -> int:
        return self._blocks[0].number

    @property
    def last_number(self) -> int:
        return self._blocks[-1].number

    def index_of(self, number: int) -> int:
        """Position of block ``number`` in the trace."""
        if not self._blocks or not self.first_number <= number <= self.last_number:
            raise DataError(f"block {number} not in trace")
        return number - self.first_number

    def block(self, number: int) -> BlockRecord:
        return self._blocks[self.index_of(number)]


# -- JSON-RPC -----------------------------------------------------------------


def _hex_int(value, field: str, height: int) -> int:
    try:
        return int(value, 16)
    except (TypeError, ValueError):
        raise DataError(f"block {height}: malformed {field} {value!r}") from None


def block_from_rpc(height: int, payload: dict | None) -> BlockRecord:
    """Build a BlockRecord from an ``eth_getBlockByNumber(.., true)`` result."""
    if payload is None:
        raise DataError(f"block {height} missing from node response")
    number = _hex_int(payload.get("number"), "number", height)
    if number != height:
        raise DataError(f"block {height}: node returned block {number}")
    txs = payload.get("transactions") or []
    prices = []
    for tx in txs:
        if not isinstance(tx, dict):
            raise DataError(f"block {height}: transactions must be full objects")
        prices.append(_hex_int(tx.get("gasPrice"), "gasPrice", height))
    return BlockRecord.from_gas_prices(
        number,
        _hex_int(payload.get("timestamp"), "timestamp", height),
        prices,
        _hex_int(payload.get("gasUsed"), "gasUsed", height),
        _hex_int(payload.get("gasLimit"), "gasLimit", height),
    )


def _get_block(client: httpx.Client, endpoint: str, height: int) -> BlockRecord:
    body = {
        "jsonrpc": "2.0",
        "id": height,
        "method": "eth_getBlockByNumber",
        "params": [hex(height), True],
    }
    try:
        response = client.post(endpoint, json=body)
        response.raise_for_status()
        reply = response.json()
    except httpx.HTTPError as exc:
        raise TransportError(f"RPC request for block {height} failed: {exc}") from exc
    except ValueError as exc:
        raise TransportError(f"RPC reply for block {height} is not JSON") from exc
    if "error" in reply:
        raise TransportError(f"RPC error for block {height}: {reply['error']}")
    return block_from_rpc(height, reply.get("result"))


def fetch_block_range(
    endpoint: str,
    start: int,
    stop: int,
    parallelism: int = 8,
    *,
    transport: httpx.BaseTransport | None = None,
    timeout: float = 30.0,
) -> BlockTrace:
    """Fetch blocks ``start..stop`` (inclusive) from a JSON-RPC node.

    Up to ``parallelism`` requests are in flight at once; the trace is
    assembled in height order, so the result does not depend on scheduling.
    """
    if start > stop:
        raise ArgumentError(f"inverted block range {start}..{stop}")
    if start < 0:
        raise ArgumentError("block heights must be non-negative")
    if parallelism < 1:
        raise ArgumentError("parallelism must be at least 1")
    heights = range(start, stop + 1)
    with httpx.Client(transport=transport, timeout=timeout) as client:
        if parallelism == 1:
            blocks = [_get_block(client, endpoint, h) for h in heights]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                blocks = list(pool.map(lambda h: _get_block(client, endpoint, h), heights))
    logger.info("fetched %d blocks %d..%d", len(blocks), start, stop)
    return BlockTrace(blocks)


# -- ETH price join -------------------------------------------------------------


def price_at(prices: Sequence[EthPricePoint], timestamp: int, _keys=None) -> float:
    """Last observed USD price at or before ``timestamp``."""
    keys = _keys if _keys is not None else [p.timestamp for p in prices]
    i = bisect.bisect_right(keys, timestamp)
    if i == 0:
        raise DataError(f"timestamp {timestamp} precedes the first ETH price point")
    return prices[i - 1].usd_price


def _check_prices(prices: Sequence[EthPricePoint]) -> list[int]:
    if not prices:
        raise ArgumentError("ETH price series is empty")
    keys = [p.timestamp for p in prices]
    for a, b in zip(keys, keys[1:]):
        if b <= a:
            raise DataError(f"ETH price timestamps not strictly increasing at {b}")
    return keys


def join_eth_price(
    trace: Iterable[BlockRecord], prices: Sequence[EthPricePoint]
) -> list[tuple[BlockRecord, float]]:
    """Pair every block with the last ETH price observed at its timestamp."""
    keys = _check_prices(prices)
    return [(b, price_at(prices, b.timestamp, keys)) for b in trace]


def eth_price_lookup(prices: Sequence[EthPricePoint]):
    """Return a carried-forward lookup ``timestamp -> usd_price``."""
    keys = _check_prices(prices)
    return lambda ts: price_at(prices, ts, keys)


# -- CSV persistence ----------------------------------------------------------------


def _fmt(value: int | None) -> str:
    return "" if value is None else str(value)


def write_trace_csv(trace: Iterable[BlockRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for b in trace:
            writer.writerow(
                [
                    b.number,
                    b.timestamp,
                    _fmt(b.min_gas_price),
                    _fmt(b.max_gas_price),
                    _fmt(b.avg_gas_price),
                    b.tx_count,
                    b.gas_used,
                    b.gas_limit,
                ]
            )


def _parse_int(text: str, name: str, line: int, nullable: bool = False) -> int | None:
    text = text.strip()
    if text == "" and nullable:
        return None
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{name} is not an integer: {text!r}", line) from None


def read_trace_csv(path) -> BlockTrace:
    path = Path(path)
    blocks: list[BlockRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
            raise ParseError(f"expected header {','.join(TRACE_HEADER)}", 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(TRACE_HEADER):
                raise ParseError(f"expected {len(TRACE_HEADER)} fields, got {len(row)}", line)
            values = [
                _parse_int(text, name, line, nullable=name.endswith("_wei"))
                for text, name in zip(row, TRACE_HEADER)
            ]
            try:
                record = BlockRecord(*values)
            except DataError as exc:
                raise DataError(f"line {line}: {exc}") from None
            if blocks and record.number != blocks[-1].number + 1:
                raise DataError(
                    f"line {line}: non-contiguous heights, block {record.number} "
                    f"follows {blocks[-1].number}"
                )
            blocks.append(record)
    return BlockTrace(blocks)


def write_price_csv(prices: Iterable[EthPricePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PRICE_HEADER)
        for p in prices:
            writer.writerow([p.timestamp, repr(float(p.usd_price))])


def read_price_csv(path) -> list[EthPricePoint]:
    points: list[EthPricePoint] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PRICE_HEADER:
            raise ParseError("expected header timestamp,usd_price", 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", line)
            ts = _parse_int(row[0], "timestamp", line)
            try:
                usd = float(Decimal(row[1].strip()))
            except InvalidOperation:
                raise ParseError(f"usd_price is not a decimal: {row[1]!r}", line) from None
            try:
                points.append(EthPricePoint(ts, usd))
            except DataError as exc:
                raise DataError(f"line {line}: {exc}") from None
    _check_prices(points)
    return points
