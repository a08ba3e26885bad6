import json

import httpx
import pytest

from gasrec.ingest import BlockRecord, BlockTrace

GWEI = 10**9


def make_block(number, ts, min_gwei=None, tx_count=1, max_gwei=None, avg_gwei=None):
    """Block helper; prices in Gwei (ints or floats), None for an empty block."""
    if min_gwei is None:
        return BlockRecord(number, ts, None, None, None, 0, 0, 10_000_000)
    lo = int(round(min_gwei * GWEI))
    hi = int(round((max_gwei if max_gwei is not None else min_gwei) * GWEI))
    avg = int(round((avg_gwei if avg_gwei is not None else min_gwei) * GWEI))
    return BlockRecord(number, ts, lo, hi, avg, tx_count, 21_000 * tx_count, 10_000_000)


def trace_from_mins(mins_gwei, start=0, ts0=1_000_000, dt=13):
    return BlockTrace(make_block(start + i, ts0 + i * dt, m) for i, m in enumerate(mins_gwei))


class FakeNode:
    """In-memory JSON-RPC node serving ``eth_getBlockByNumber``."""

    def __init__(self, blocks: dict[int, dict]):
        self.blocks = blocks
        self.calls = 0

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.calls += 1
        body = json.loads(request.content)
        assert body["method"] == "eth_getBlockByNumber"
        height = int(body["params"][0], 16)
        assert body["params"][1] is True
        return httpx.Response(
            200, json={"jsonrpc": "2.0", "id": body["id"], "result": self.blocks.get(height)}
        )

    def transport(self):
        return httpx.MockTransport(self)


def rpc_block(height, ts, gas_prices_wei, gas_used=21000, gas_limit=10_000_000):
    return {
        "number": hex(height),
        "timestamp": hex(ts),
        "gasUsed": hex(gas_used),
        "gasLimit": hex(gas_limit),
        "transactions": [{"hash": f"0x{height:x}{i:x}", "gasPrice": hex(p)} for i, p in enumerate(gas_prices_wei)],
    }


@pytest.fixture
def fake_node():
    blocks = {
        h: rpc_block(h, 1_600_000_000 + 13 * (h - 100), [(h % 7 + 1) * GWEI, (h % 3 + 2) * GWEI])
        for h in range(100, 140)
    }
    blocks[120] = rpc_block(120, 1_600_000_000 + 13 * 20, [])
    blocks[121] = rpc_block(121, 1_600_000_000 + 13 * 21, [1 * GWEI, 2 * GWEI, 3 * GWEI])
    return FakeNode(blocks)


# -- acceptance report ------------------------------------------------------------------
#
# Tests marked ``acceptance(number, title)`` get one PASS/FAIL/SKIP line each
# in the terminal summary, with the measured values they record as "detail".

_acceptance: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
        _acceptance[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, status, detail = _acceptance[number]
        line = f"{status} {number}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
