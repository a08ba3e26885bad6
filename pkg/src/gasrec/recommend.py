"""Gas price recommendation from a price forecast, plus the baseline
strategies it is compared against (Geth, GasStation-Express, look-ahead
oracle, constant price)."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .errors import ArgumentError, DataError, FitError
from .features import NormalizationParams, denormalize
from .forecast import GruModel, gru_forward, predict
from .ingest import WEI_PER_GWEI

GETH_LOOKBACK = 100
GETH_PERCENTILE = Fraction(60, 100)
EXPRESS_LOOKBACK = 200
INITIAL_PRICE_PERCENTILE = Fraction(20, 100)


def nearest_rank(values: Sequence, fraction) -> object:
    """The ``ceil(fraction * n)``-th smallest value (1-based, at least 1st)."""
    if len(values) == 0:
        raise ArgumentError("percentile of an empty sequence")
    if isinstance(fraction, float):
        fraction = Fraction(str(fraction))
    if not 0 <= fraction <= 1:
        raise ArgumentError("percentile fraction must lie in [0, 1]")
    rank = max(1, math.ceil(Fraction(fraction) * len(values)))
    return sorted(values)[rank - 1]


def gwei_to_wei(gwei: float) -> int:
    """Round a Gwei amount to whole wei, never below 1 wei."""
    return max(1, int(round(gwei * WEI_PER_GWEI)))


def _scale_wei(wei: int, factor: float) -> int:
    return max(1, int(round(wei * factor)))


# -- proposed algorithm -----------------------------------------------------------


@dataclass(frozen=True)
class SlopeNormalizer:
    a_min: float
    a_max: float

    def __post_init__(self):
        if not self.a_max > self.a_min:
            raise FitError(f"slope range [{self.a_min}, {self.a_max}] is empty")

    def to_dict(self) -> dict:
        return {"a_min": self.a_min, "a_max": self.a_max}


@dataclass(frozen=True)
class Recommendation:
    g_hat: float  # Gwei
    slope: float  # Gwei per step
    a_tilde: float
    coefficient: float
    urgency: float
    price: float  # Gwei
    price_wei: int

    def to_dict(self) -> dict:
        return {
            "g_hat": self.g_hat,
            "slope": self.slope,
            "a_tilde": self.a_tilde,
            "coefficient": self.coefficient,
            "urgency": self.urgency,
            "price_gwei": self.price,
            "price_wei": self.price_wei,
        }


def initial_price(predictions) -> float:
    """Nearest-rank 20th percentile of the predicted prices."""
    p = [float(v) for v in np.ravel(predictions)]
    return nearest_rank(p, INITIAL_PRICE_PERCENTILE)


def fit_slope(predictions) -> float:
    """Least-squares slope of the predictions against x = 1..s."""
    y = np.asarray(predictions, dtype=float).ravel()
    if y.size < 2:
        raise ArgumentError("need at least two predictions to fit a slope")
    x = np.arange(1, y.size + 1, dtype=float)
    dx = x - x.mean()
    return float(dx @ (y - y.mean()) / (dx @ dx))


def fit_slope_normalizer(prediction_windows) -> SlopeNormalizer:
    """Slope extremes over a collection of s-step prediction vectors."""
    windows = list(prediction_windows)
    if len(windows) < 2:
        raise FitError("need at least two windows to fit slope extremes")
    slopes = [fit_slope(w) for w in windows]
    lo, hi = min(slopes), max(slopes)
    if lo == hi:
        raise FitError("all windows share the same slope")
    return SlopeNormalizer(lo, hi)


def normalize_slope(a: float, normalizer: SlopeNormalizer) -> float:
    """Min-max scale a slope, clamped to [0, 1]."""
    scaled = (a - normalizer.a_min) / (normalizer.a_max - normalizer.a_min)
    return min(1.0, max(0.0, scaled))


def coefficient(a_tilde: float) -> float:
    """exp(2 a_tilde - 2), between e^-2 (steep decline) and 1 (steep rise)."""
    if not 0.0 <= a_tilde <= 1.0:
        raise ArgumentError(f"normalized slope {a_tilde} outside [0, 1]")
    return math.exp(2.0 * a_tilde - 2.0)


def recommend_from_forecast(
    predictions_gwei, slope_normalizer: SlopeNormalizer, urgency: float
) -> Recommendation:
    """Compose the price from a denormalized forecast: percentile, trend, urgency."""
    if not urgency > 0:
        raise ArgumentError("urgency must be positive")
    g_hat = initial_price(predictions_gwei)
    a = fit_slope(predictions_gwei)
    a_tilde = normalize_slope(a, slope_normalizer)
    c = coefficient(a_tilde)
    price = g_hat * c * urgency
    return Recommendation(g_hat, a, a_tilde, c, urgency, price, gwei_to_wei(price))


def recommend_proposed(
    model: GruModel,
    normalizer: NormalizationParams,
    slope_normalizer: SlopeNormalizer,
    history_window,
    urgency: float,
) -> Recommendation:
    """Forecast from a preprocessed (l, 6) window and recommend a price."""
    window = np.asarray(history_window, dtype=float)
    if window.ndim != 2:
        raise ArgumentError("history window must be a (l, features) matrix")
    pred, _ = gru_forward(model, window)
    return recommend_from_forecast(denormalize(pred, normalizer), slope_normalizer, urgency)


def slope_normalizer_for(
    model: GruModel,
    normalizer: NormalizationParams,
    inputs,
    targets=None,
    source: str = "predictions",
) -> SlopeNormalizer:
    """Fit slope extremes on training windows.

    ``source="predictions"`` uses the model's forecasts, ``"targets"`` the
    true future targets of the same windows.
    """
    if source == "predictions":
        vectors = denormalize(predict(model, inputs), normalizer)
    elif source == "targets":
        if targets is None:
            raise ArgumentError("targets required for source='targets'")
        vectors = denormalize(targets, normalizer)
    else:
        raise ArgumentError(f"unknown slope source {source!r}")
    return fit_slope_normalizer(vectors)


# -- baselines ---------------------------------------------------------------------------


def _priced(min_prices: Sequence[int | None]) -> list[int]:
    return [p for p in min_prices if p is not None]


def recommend_geth(min_prices: Sequence[int | None], scale: float = 1.0) -> int:
    """60th percentile of the last 100 block minimum prices, times ``scale``.

    ``min_prices`` are wei values oldest first; ``None`` marks empty blocks,
    which are skipped.
    """
    if not scale > 0:
        raise ArgumentError("scale must be positive")
    priced = _priced(list(min_prices)[-GETH_LOOKBACK:])
    if not priced:
        raise DataError("no priced block in the Geth look-back window")
    return _scale_wei(nearest_rank(priced, GETH_PERCENTILE), scale)


class ExpressTier(enum.Enum):
    FASTEST = "fastest"
    FAST = "fast"
    STANDARD = "standard"
    SAFELOW = "safelow"

    @property
    def fraction(self) -> Fraction:
        return {
            ExpressTier.FASTEST: Fraction(1),
            ExpressTier.FAST: Fraction(90, 100),
            ExpressTier.STANDARD: Fraction(60, 100),
            ExpressTier.SAFELOW: Fraction(35, 100),
        }[self]


def recommend_express(min_prices: Sequence[int | None], tier) -> int:
    """Lowest price that at least the tier's share of the last 200 blocks
    accepted, i.e. the nearest-rank percentile of block minimum prices."""
    tier = ExpressTier(tier) if not isinstance(tier, ExpressTier) else tier
    priced = _priced(list(min_prices)[-EXPRESS_LOOKBACK:])
    if not priced:
        raise DataError("no priced block in the Express look-back window")
    if tier is ExpressTier.FASTEST:
        return max(1, max(priced))
    return max(1, nearest_rank(priced, tier.fraction))


def recommend_lookahead(future_min_prices: Sequence[int | None], blocks: int) -> int:
    """Cheapest price that still gets included within ``blocks`` blocks.

    Uses future data; for evaluation only.
    """
    if blocks < 1:
        raise ArgumentError("look-ahead must be at least one block")
    window = list(future_min_prices)[:blocks]
    if len(window) < blocks:
        raise DataError(f"need {blocks} future blocks, only {len(window)} available")
    priced = _priced(window)
    if not priced:
        raise DataError("no priced block in the look-ahead window")
    return max(1, min(priced))


# -- strategy descriptors ---------------------------------------------------------------


@dataclass(frozen=True)
class Proposed:
    urgency: float = 1.0
    name = "proposed"

    def __post_init__(self):
        if not self.urgency > 0:
            raise ArgumentError("urgency must be positive")

    @property
    def parameter(self) -> str:
        return f"{self.urgency:g}"


@dataclass(frozen=True)
class Geth:
    scale: float = 1.0
    name = "geth"

    def __post_init__(self):
        if not self.scale > 0:
            raise ArgumentError("scale must be positive")

    @property
    def parameter(self) -> str:
        return f"{self.scale:g}"


@dataclass(frozen=True)
class Express:
    tier: ExpressTier = ExpressTier.STANDARD
    name = "express"

    def __post_init__(self):
        if not isinstance(self.tier, ExpressTier):
            try:
                object.__setattr__(self, "tier", ExpressTier(str(self.tier).lower()))
            except ValueError:
                raise ArgumentError(f"unknown Express tier {self.tier!r}") from None

    @property
    def parameter(self) -> str:
        return self.tier.value


@dataclass(frozen=True)
class LookAhead:
    blocks: int = 15
    name = "lookahead"

    def __post_init__(self):
        if self.blocks < 1:
            raise ArgumentError("look-ahead must be at least one block")

    @property
    def parameter(self) -> str:
        return str(self.blocks)


@dataclass(frozen=True)
class Constant:
    price_wei: int
    name = "constant"

    def __post_init__(self):
        if self.price_wei < 1:
            raise ArgumentError("constant price must be at least 1 wei")

    @property
    def parameter(self) -> str:
        return str(self.price_wei)


Strategy = Union[Proposed, Geth, Express, LookAhead, Constant]


def parse_strategy(name: str, param: str | None) -> Strategy:
    """Build a strategy from its CLI name and parameter string.

    Constant prices are given in Gwei.
    """
    name = name.lower()
    try:
        if name == "proposed":
            return Proposed(float(param) if param is not None else 1.0)
        if name == "geth":
            return Geth(float(param) if param is not None else 1.0)
        if name == "express":
            return Express(param or "standard")
        if name == "lookahead":
            return LookAhead(int(param) if param is not None else 15)
        if name == "constant":
            if param is None:
                raise ArgumentError("constant strategy needs a price in Gwei")
            return Constant(gwei_to_wei(float(param)))
    except ValueError as exc:
        if isinstance(exc, ArgumentError):
            raise
        raise ArgumentError(f"bad parameter {param!r} for strategy {name}") from None
    raise ArgumentError(f"unknown strategy {name!r}")
