"""``gasrec`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import analytics, backtest, features, forecast, ingest, recommend
from .config import AppConfig, check_urgency, load_config
from .errors import ArgumentError, GasrecError

logger = logging.getLogger("gasrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override train.seed")
    p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(
        prog="gasrec",
        description="Ethereum gas price forecasting, recommendation and backtesting.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("ingest", parents=[common], help="fetch blocks into a trace CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--rpc-url", help="JSON-RPC endpoint")
    src.add_argument("--from-csv", help="import an existing block CSV instead of fetching")
    p.add_argument("--from", dest="start", type=int, help="first block height")
    p.add_argument("--to", dest="stop", type=int, help="last block height (inclusive)")
    p.add_argument("--out", required=True)
    p.add_argument("--parallelism", type=int, default=8)

    p = sub.add_parser("analyze", parents=[common], help="summary statistics, correlations, ACF")
    p.add_argument("--trace", required=True)
    p.add_argument("--interval", type=int, default=3600, help="aggregation interval in seconds")
    p.add_argument("--max-lag", type=int, default=144)
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="build training windows")
    p.add_argument("--trace")
    p.add_argument("--eth-prices")
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="train the GRU forecaster")
    p.add_argument("--windows")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--report", help="write the per-epoch losses as JSON")

    p = sub.add_parser("recommend", parents=[common], help="recommend a gas price at a block")
    p.add_argument("--model")
    p.add_argument("--trace")
    p.add_argument("--eth-prices")
    p.add_argument("--at-block", type=int, required=True)
    p.add_argument("--urgency", type=float)
    p.add_argument("--strategy", default="proposed",
                   choices=["proposed", "geth", "express", "lookahead", "constant"])
    p.add_argument("--param")

    p = sub.add_parser("backtest", parents=[common], help="replay strategies over a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--model")
    p.add_argument("--eth-prices")
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--end", type=int, required=True)
    p.add_argument("--last", type=int, required=True)
    p.add_argument("--strategy", action="append", default=[],
                   choices=["proposed", "geth", "express", "lookahead", "constant"])
    p.add_argument("--param", action="append", default=[])
    p.add_argument("--out", required=True)
    return parser


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"gasrec: error: {flag} is required (flag or config file)")
    return value


# -- subcommands -----------------------------------------------------------------------


def cmd_ingest(args, cfg: AppConfig) -> None:
    if args.rpc_url:
        if args.start is None or args.stop is None:
            raise UsageError("gasrec ingest: error: --from and --to are required with --rpc-url")
        trace = ingest.fetch_block_range(args.rpc_url, args.start, args.stop, args.parallelism)
    else:
        trace = ingest.read_trace_csv(args.from_csv)
        if args.start is not None or args.stop is not None:
            lo = trace.first_number if args.start is None else args.start
            hi = trace.last_number if args.stop is None else args.stop
            if lo > hi:
                raise ArgumentError(f"inverted block range {lo}..{hi}")
            trace = trace[trace.index_of(lo) : trace.index_of(hi) + 1]
    ingest.write_trace_csv(trace, args.out)
    logger.info("wrote %d blocks to %s", len(trace), args.out)


def analysis_rows(trace, interval: int, max_lag: int) -> list[tuple]:
    """Long-format rows ``(section, variable, key, value)``."""
    rows = []
    for fld in ("avg_gas_price", "max_gas_price", "min_gas_price", "tx_count", "gas_utilization"):
        vals = analytics.block_values(trace, fld)
        if len(vals) >= 2:
            for key, value in analytics.descriptive_stats(vals).items():
                rows.append(("stats", fld, key, value))
    corr = analytics.correlation_matrix(trace)
    for i, a in enumerate(corr.labels):
        for j, b in enumerate(corr.labels):
            rows.append(("correlation", a, b, corr.values[i, j]))
    for fld in ("avg_gas_price", "max_gas_price", "min_gas_price"):
        series = analytics.aggregate_interval(trace, fld, interval)
        for start, value in series.points:
            rows.append(("interval_mean", fld, start, value))
    for fld in ("avg_gas_price", "min_gas_price"):
        series = analytics.aggregate_interval(trace, fld, interval)
        lag = min(max_lag, len(series) - 1)
        if lag < 1:
            continue
        try:
            acf = analytics.autocorrelation(series, lag)
        except GasrecError as exc:
            logger.warning("skipping ACF of %s: %s", fld, exc)
            continue
        rows.extend(("acf", fld, k, v) for k, v in enumerate(acf))
    return rows


def cmd_analyze(args, cfg: AppConfig) -> None:
    trace = ingest.read_trace_csv(args.trace)
    rows = analysis_rows(trace, args.interval, args.max_lag)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("section", "variable", "key", "value"))
        for section, var, key, value in rows:
            w.writerow((section, var, key, repr(float(value))))


def cmd_preprocess(args, cfg: AppConfig) -> None:
    trace = ingest.read_trace_csv(_need(args.trace or cfg.path("trace"), "--trace"))
    prices = ingest.read_price_csv(_need(args.eth_prices or cfg.path("eth_prices"), "--eth-prices"))
    out = _need(args.out or cfg.path("windows"), "--out")
    data = features.prepare_training_data(trace, prices, cfg.pipeline, cfg.train.split)
    features.save_windows(out, data)
    print(json.dumps({"windows": len(data.windows), "steps": len(data.steps)}))


def cmd_train(args, cfg: AppConfig) -> None:
    path = _need(args.windows or cfg.path("windows"), "--windows")
    out = _need(args.out or cfg.path("model"), "--out")
    windows, pipeline, normalizer, _ = features.load_windows(path)
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    model, report = forecast.train(windows, tcfg)
    train_set, _ = forecast.split_windows(windows, tcfg.split)
    slopes = recommend.slope_normalizer_for(
        model, normalizer, train_set.inputs, train_set.targets, cfg.slope_source
    )
    meta = {
        "pipeline": pipeline.to_dict(),
        "slope_normalizer": slopes.to_dict(),
        "train": dataclasses.asdict(tcfg),
        "best_epoch": report.best_epoch,
    }
    forecast.save_model(model, normalizer, out, meta)
    if args.report:
        Path(args.report).write_text(
            json.dumps(
                {"train_loss": report.train_loss, "val_loss": report.val_loss,
                 "best_epoch": report.best_epoch},  # fmt: skip
                indent=2,
            )
        )
    print(json.dumps({"best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss}))


def _forecaster(model_path, trace, prices_path) -> backtest.ProposedForecaster:
    model, normalizer, meta = forecast.load_model_bundle(model_path)
    try:
        pipeline = features.PipelineConfig(**meta["pipeline"])
        slopes = recommend.SlopeNormalizer(**meta["slope_normalizer"])
    except (KeyError, TypeError) as exc:
        raise forecast.ModelLoadError(f"model metadata incomplete: {exc}") from exc
    prices = ingest.read_price_csv(_need(prices_path, "--eth-prices"))
    return backtest.ProposedForecaster(model, normalizer, slopes, pipeline, trace, prices)


def cmd_recommend(args, cfg: AppConfig) -> None:
    trace = ingest.read_trace_csv(_need(args.trace or cfg.path("trace"), "--trace"))
    block = args.at_block
    if args.strategy == "proposed":
        urgency = args.urgency if args.urgency is not None else (
            float(args.param) if args.param is not None else cfg.urgency
        )
        check_urgency(urgency)
        fc = _forecaster(
            _need(args.model or cfg.path("model"), "--model"),
            trace,
            args.eth_prices or cfg.path("eth_prices"),
        )
        rec = fc.recommendation(block, urgency)
        print(json.dumps({"block": block, "strategy": "proposed", **rec.to_dict()}))
        return
    strategy = recommend.parse_strategy(args.strategy, args.param)
    price = backtest.make_recommender(strategy, trace)(block)
    print(json.dumps({"block": block, "strategy": strategy.name,
                      "parameter": strategy.parameter, "price_wei": price}))  # fmt: skip


def cmd_backtest(args, cfg: AppConfig) -> None:
    if args.strategy:
        if args.param and len(args.param) != len(args.strategy):
            raise UsageError("gasrec backtest: error: give one --param per --strategy")
        params = args.param or [None] * len(args.strategy)
        strategies = [recommend.parse_strategy(s, p) for s, p in zip(args.strategy, params)]
    else:
        strategies = cfg.strategies
    if not strategies:
        raise UsageError("gasrec backtest: error: at least one --strategy is required")
    for s in strategies:
        if isinstance(s, recommend.Proposed):
            check_urgency(s.urgency)
    trace = ingest.read_trace_csv(args.trace)
    fc = None
    if any(isinstance(s, recommend.Proposed) for s in strategies):
        fc = _forecaster(
            _need(args.model or cfg.path("model"), "--model"),
            trace,
            args.eth_prices or cfg.path("eth_prices"),
        )
    summaries = backtest.compare(trace, args.start, args.end, args.last, strategies, fc)
    backtest.write_results_csv(summaries, args.out)


COMMANDS = {
    "ingest": cmd_ingest,
    "analyze": cmd_analyze,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "backtest": cmd_backtest,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else AppConfig()
        if getattr(args, "seed", None) is not None:
            cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ArgumentError as exc:
        print(f"gasrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GasrecError, OSError) as exc:
        print(f"gasrec: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
