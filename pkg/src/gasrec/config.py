"""Application configuration file (TOML or JSON).

Sections map onto module configs::

    [paths]      trace, eth_prices, windows, model, out
    [features]   PipelineConfig fields
    [train]      TrainConfig fields
    [recommend]  urgency, slope_source ("predictions" or "targets")
    [backtest]   strategies = [["proposed", "1.0"], ["geth", "1.0"], ...]

Command-line flags take precedence over file values, which take precedence
over built-in defaults.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ArgumentError
from .features import PipelineConfig
from .forecast import TrainConfig
from .recommend import Strategy, parse_strategy

logger = logging.getLogger(__name__)

PATH_KEYS = ("trace", "eth_prices", "windows", "model", "out")
URGENCY_RANGE = (0.7, 1.3)


@dataclass
class AppConfig:
    paths: dict[str, str] = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    urgency: float = 1.0
    slope_source: str = "predictions"
    strategies: list[Strategy] = field(default_factory=list)

    def path(self, key: str) -> str | None:
        return self.paths.get(key)


def _build(cls, section: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ArgumentError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ArgumentError(f"bad value in [{name}]: {exc}") from exc


def check_urgency(urgency: float) -> None:
    if not urgency > 0:
        raise ArgumentError("urgency must be positive")
    lo, hi = URGENCY_RANGE
    if not lo <= urgency <= hi:
        logger.warning("urgency %g is outside the usual range [%g, %g]", urgency, lo, hi)


def parse_config(doc: dict) -> AppConfig:
    unknown = set(doc) - {"paths", "features", "train", "recommend", "backtest"}
    if unknown:
        raise ArgumentError(f"unknown config sections: {', '.join(sorted(unknown))}")
    paths = dict(doc.get("paths", {}))
    bad = set(paths) - set(PATH_KEYS)
    if bad:
        raise ArgumentError(f"unknown keys in [paths]: {', '.join(sorted(bad))}")
    for key, value in paths.items():
        if not isinstance(value, str) or not value:
            raise ArgumentError(f"paths.{key} must be a non-empty string")
    pipeline = _build(PipelineConfig, doc.get("features", {}), "features")
    train = _build(TrainConfig, doc.get("train", {}), "train")
    rec = dict(doc.get("recommend", {}))
    bad = set(rec) - {"urgency", "slope_source"}
    if bad:
        raise ArgumentError(f"unknown keys in [recommend]: {', '.join(sorted(bad))}")
    urgency = float(rec.get("urgency", 1.0))
    check_urgency(urgency)
    slope_source = rec.get("slope_source", "predictions")
    if slope_source not in ("predictions", "targets"):
        raise ArgumentError("recommend.slope_source must be 'predictions' or 'targets'")
    bt = dict(doc.get("backtest", {}))
    bad = set(bt) - {"strategies"}
    if bad:
        raise ArgumentError(f"unknown keys in [backtest]: {', '.join(sorted(bad))}")
    strategies = []
    for entry in bt.get("strategies", []):
        if not isinstance(entry, (list, tuple)) or not 1 <= len(entry) <= 2:
            raise ArgumentError(f"strategy entries are [name, parameter] pairs, got {entry!r}")
        s = parse_strategy(str(entry[0]), None if len(entry) == 1 else str(entry[1]))
        if s.name == "proposed":
            check_urgency(s.urgency)
        strategies.append(s)
    return AppConfig(paths, pipeline, train, urgency, slope_source, strategies)


def load_config(path) -> AppConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArgumentError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(raw)
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ArgumentError(f"malformed config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ArgumentError("config must be a key-value document")
    return parse_config(doc)
