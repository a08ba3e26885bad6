"""Turn a block trace into model tensors.

The pipeline is: 5-minute aggregation -> outlier removal (fit portion only)
-> 24h lag feature -> min-max normalization -> sliding windows with
per-window Fourier smoothing of the inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ArgumentError, DataError, FitError, GasrecError
from .ingest import WEI_PER_GWEI, BlockRecord, EthPricePoint, eth_price_lookup

FEATURE_NAMES = (
    "avg_gas_price",
    "avg_gas_price_lag24h",
    "tx_count",
    "max_gas_price",
    "min_gas_price",
    "eth_price",
)
N_FEATURES = len(FEATURE_NAMES)
DAY_SECONDS = 86400


@dataclass(frozen=True)
class PipelineConfig:
    step_seconds: int = 300
    lag_steps: int | None = None  # derived from step_seconds when omitted
    outlier_k: float = 1.5
    energy_threshold: float = 0.95
    window_length: int = 72
    horizon: int = 12
    smoothing: bool = True

    def __post_init__(self):
        if self.step_seconds <= 0 or DAY_SECONDS % self.step_seconds:
            raise ArgumentError("step_seconds must be a positive divisor of 86400")
        expected = DAY_SECONDS // self.step_seconds
        if self.lag_steps is None:
            object.__setattr__(self, "lag_steps", expected)
        elif self.lag_steps != expected:
            raise ArgumentError(f"lag_steps must equal 86400 / step_seconds = {expected}")
        if not self.outlier_k > 0:
            raise ArgumentError("outlier_k must be positive")
        if not 0 < self.energy_threshold <= 1:
            raise ArgumentError("energy_threshold must lie in (0, 1]")
        if self.window_length < 1 or self.horizon < 1:
            raise ArgumentError("window_length and horizon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TimeStep:
    """One aggregation interval. Prices are Gwei, ``eth_price`` is USD.

    ``avg_gas_price_lag`` stays ``None`` until :func:`add_lag` fills it.
    """

    index: int
    start_ts: int
    avg_gas_price: float
    tx_count: float
    max_gas_price: float
    min_gas_price: float
    eth_price: float
    target: float
    avg_gas_price_lag: float | None = None
    synthetic: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.target) and self.target > 0):
            raise DataError(f"step {self.index}: target must be finite and positive")

    @property
    def features(self) -> tuple[float, ...]:
        if self.avg_gas_price_lag is None:
            raise ArgumentError(f"step {self.index}: lag feature not populated")
        return (
            self.avg_gas_price,
            self.avg_gas_price_lag,
            self.tx_count,
            self.max_gas_price,
            self.min_gas_price,
            self.eth_price,
        )


@dataclass(frozen=True)
class NormalizationParams:
    feature_min: tuple[float, ...]
    feature_max: tuple[float, ...]
    target_min: float
    target_max: float

    def __post_init__(self):
        for name, lo, hi in zip(FEATURE_NAMES, self.feature_min, self.feature_max):
            if not hi > lo:
                raise FitError(f"feature {name!r} has max <= min")
        if not self.target_max > self.target_min:
            raise FitError("target has max <= min")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(
            tuple(float(v) for v in d["feature_min"]),
            tuple(float(v) for v in d["feature_max"]),
            float(d["target_min"]),
            float(d["target_max"]),
        )


@dataclass(frozen=True)
class WindowSample:
    inputs: np.ndarray  # (l, 6)
    targets: np.ndarray  # (s,)
    end_index: int  # step index of the last input row


@dataclass
class WindowSet:
    """Stacked windows: ``inputs`` (N, l, 6), ``targets`` (N, s)."""

    inputs: np.ndarray
    targets: np.ndarray
    end_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, i) -> WindowSample | "WindowSet":
        if isinstance(i, slice):
            return WindowSet(self.inputs[i], self.targets[i], self.end_index[i])
        return WindowSample(self.inputs[i], self.targets[i], int(self.end_index[i]))

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.end_index[idx])


# -- aggregation ---------------------------------------------------------------


def _interp_missing(col: np.ndarray) -> np.ndarray:
    bad = np.isnan(col)
    if not bad.any():
        return col
    pos = np.arange(col.size)
    out = col.copy()
    out[bad] = np.interp(pos[bad], pos[~bad], col[~bad])
    return out


def aggregate_steps(
    trace: Sequence[BlockRecord],
    eth_prices: Sequence[EthPricePoint],
    config: PipelineConfig = PipelineConfig(),
) -> list[TimeStep]:
    """Average per-block statistics over epoch-aligned steps.

    Price features average over non-empty blocks, ``tx_count`` over all
    blocks, and ``eth_price`` is the carried-forward value at the step start.
    Steps without any priced block get linearly interpolated prices and are
    flagged ``synthetic``.
    """
    step = config.step_seconds
    if len(trace) == 0:
        raise ArgumentError("trace is empty")
    if trace[-1].timestamp - trace[0].timestamp < step:
        raise ArgumentError(f"trace spans less than one {step}s step")
    lookup = eth_price_lookup(eth_prices)

    first = trace[0].timestamp // step
    n = trace[-1].timestamp // step - first + 1
    # columns: avg, max, min, tx_count; sums and counts
    price_sum = np.zeros((n, 3))
    priced = np.zeros(n, dtype=np.int64)
    tx_sum = np.zeros(n)
    blocks = np.zeros(n, dtype=np.int64)
    for b in trace:
        i = b.timestamp // step - first
        blocks[i] += 1
        tx_sum[i] += b.tx_count
        if b.has_prices:
            priced[i] += 1
            price_sum[i, 0] += b.avg_gas_price / WEI_PER_GWEI
            price_sum[i, 1] += b.max_gas_price / WEI_PER_GWEI
            price_sum[i, 2] += b.min_gas_price / WEI_PER_GWEI
    if not priced.any():
        raise DataError("trace contains no block with transactions")
    with np.errstate(invalid="ignore", divide="ignore"):
        prices = price_sum / priced[:, None]
        txc = tx_sum / blocks
    prices[priced == 0] = np.nan
    txc[blocks == 0] = np.nan
    prices = np.column_stack([_interp_missing(prices[:, j]) for j in range(3)])
    txc = _interp_missing(txc)

    steps = []
    for i in range(n):
        idx = first + i
        steps.append(
            TimeStep(
                index=idx,
                start_ts=idx * step,
                avg_gas_price=float(prices[i, 0]),
                tx_count=float(txc[i]),
                max_gas_price=float(prices[i, 1]),
                min_gas_price=float(prices[i, 2]),
                eth_price=float(lookup(idx * step)),
                target=float(prices[i, 2]),
                synthetic=bool(priced[i] == 0),
            )
        )
    return steps


def _check_contiguous(steps: Sequence[TimeStep]) -> None:
    for a, b in zip(steps, steps[1:]):
        if b.index != a.index + 1:
            raise DataError(f"steps not contiguous between {a.index} and {b.index}")


def add_lag(steps: Sequence[TimeStep], lag_steps: int) -> list[TimeStep]:
    """Fill the lagged average price and drop the first ``lag_steps`` steps."""
    if lag_steps < 1:
        raise ArgumentError("lag_steps must be positive")
    if len(steps) <= lag_steps:
        raise ArgumentError(f"need more than {lag_steps} steps for the lag, got {len(steps)}")
    _check_contiguous(steps)
    return [
        replace(steps[t], avg_gas_price_lag=steps[t - lag_steps].avg_gas_price)
        for t in range(lag_steps, len(steps))
    ]


# -- outliers --------------------------------------------------------------------


def outlier_mask(values, k: float) -> np.ndarray:
    """True where a value lies more than ``k`` population std from the mean."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ArgumentError("need at least two values")
    if math.isinf(k):
        return np.zeros(x.size, dtype=bool)
    return np.abs(x - x.mean()) > k * x.std()


def remove_outliers(steps: Sequence[TimeStep], k: float) -> list[TimeStep]:
    """Delete outlying targets and refill them by linear interpolation.

    Mean and std come from the whole input target series, computed once. The
    same mask applies to every feature column so the grid stays gap-free.
    """
    y = np.array([s.target for s in steps])
    mask = outlier_mask(y, k)
    if mask.all():
        raise DataError("outlier removal deleted every step")
    if not mask.any():
        return list(steps)
    _check_contiguous(steps)
    cols = {
        name: np.array([getattr(s, name) for s in steps], dtype=float)
        for name in ("avg_gas_price", "tx_count", "max_gas_price", "min_gas_price", "eth_price", "target")
    }
    if steps[0].avg_gas_price_lag is not None:
        cols["avg_gas_price_lag"] = np.array([s.avg_gas_price_lag for s in steps])
    for name, col in cols.items():
        col[mask] = np.nan
        cols[name] = _interp_missing(col)
    out = []
    for i, s in enumerate(steps):
        if not mask[i]:
            out.append(s)
            continue
        out.append(replace(s, **{n: float(c[i]) for n, c in cols.items()}, synthetic=True))
    return out


# -- normalization --------------------------------------------------------------------


def steps_to_arrays(steps: Sequence[TimeStep]) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix (n, 6) and target vector (n,)."""
    x = np.array([s.features for s in steps], dtype=float).reshape(len(steps), N_FEATURES)
    y = np.array([s.target for s in steps], dtype=float)
    return x, y


def fit_normalizer(steps: Sequence[TimeStep]) -> NormalizationParams:
    x, y = steps_to_arrays(steps)
    if len(steps) < 2:
        raise FitError("need at least two steps to fit a normalizer")
    lo, hi = x.min(axis=0), x.max(axis=0)
    for name, a, b in zip(FEATURE_NAMES, lo, hi):
        if not b > a:
            raise FitError(f"feature {name!r} is constant over the training data")
    if not y.max() > y.min():
        raise FitError("target is constant over the training data")
    return NormalizationParams(
        tuple(float(v) for v in lo), tuple(float(v) for v in hi), float(y.min()), float(y.max())
    )


def _scale(x, lo, hi) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def normalize_features(x, params: NormalizationParams) -> np.ndarray:
    return _scale(x, np.asarray(params.feature_min), np.asarray(params.feature_max))


def normalize_targets(y, params: NormalizationParams) -> np.ndarray:
    return _scale(y, params.target_min, params.target_max)


def normalize(steps: Sequence[TimeStep], params: NormalizationParams):
    """Scale features and targets into [0, 1], clamping out-of-range values."""
    x, y = steps_to_arrays(steps)
    return normalize_features(x, params), normalize_targets(y, params)


def denormalize(values, params: NormalizationParams) -> np.ndarray:
    """Map normalized target values back to Gwei."""
    v = np.asarray(values, dtype=float)
    return params.target_min + v * (params.target_max - params.target_min)


# -- Fourier smoothing ----------------------------------------------------------


def _smooth(x: np.ndarray, theta: float, axis: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    spec = np.fft.rfft(x, axis=axis)
    nfreq = spec.shape[axis]
    # one-sided spectrum: every bin except DC (and Nyquist for even n) stands
    # for a conjugate pair
    weight = np.full(nfreq, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    shape = [1] * x.ndim
    shape[axis] = nfreq
    energy = weight.reshape(shape) * np.abs(spec) ** 2
    cum = np.cumsum(energy, axis=axis)
    total = np.take(cum, [-1], axis=axis)
    reached = cum >= theta * total
    cutoff = np.argmax(reached, axis=axis)  # first bin meeting the threshold
    keep = np.arange(nfreq).reshape(shape) <= np.expand_dims(cutoff, axis)
    kept = np.take_along_axis(cum, np.expand_dims(cutoff, axis), axis=axis)
    if np.any(kept < theta * total * (1 - 1e-12)):
        raise GasrecError("Fourier truncation kept less energy than the threshold")
    return np.fft.irfft(np.where(keep, spec, 0), n=n, axis=axis)


def fourier_smooth(values, theta: float) -> np.ndarray:
    """Low-pass a vector by keeping the lowest frequencies holding ``theta``
    of the spectral energy. DC is always kept, so the mean is preserved."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ArgumentError("fourier_smooth needs a vector of length >= 2")
    if not 0 < theta <= 1:
        raise ArgumentError("theta must lie in (0, 1]")
    return _smooth(x, theta, axis=0)


# -- windows ---------------------------------------------------------------------------


def make_windows(
    features,
    targets,
    window_length: int,
    horizon: int,
    apply_smoothing: bool = True,
    theta: float = 0.95,
    first_index: int = 0,
) -> WindowSet:
    """Stride-1 sliding windows over normalized arrays.

    Sample ``i`` takes inputs from rows ``i .. i+l-1`` and targets from rows
    ``i+l .. i+l+s-1``. Smoothing touches each input column of each window
    independently (then clips to [0, 1]); targets are left as-is. Returns an
    empty set when fewer than ``l + s`` rows are available.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ArgumentError("features must be (n, d) with one target per row")
    n, d = x.shape
    count = n - window_length - horizon + 1
    if count <= 0:
        return WindowSet(
            np.zeros((0, window_length, d)), np.zeros((0, horizon)), np.zeros(0, dtype=np.int64)
        )
    # sliding_window_view puts the window axis last
    inputs = np.lib.stride_tricks.sliding_window_view(x[: n - horizon], window_length, axis=0)
    inputs = np.ascontiguousarray(inputs.transpose(0, 2, 1))
    outs = np.lib.stride_tricks.sliding_window_view(y[window_length:], horizon)
    outs = np.ascontiguousarray(outs)
    if apply_smoothing:
        if not 0 < theta <= 1:
            raise ArgumentError("theta must lie in (0, 1]")
        inputs = np.clip(_smooth(inputs, theta, axis=1), 0.0, 1.0)
    end_index = first_index + np.arange(count, dtype=np.int64) + window_length - 1
    return WindowSet(inputs, outs, end_index)


def smooth_window(window, config: PipelineConfig) -> np.ndarray:
    """Apply the configured input smoothing to a single (l, 6) window."""
    w = np.asarray(window, dtype=float)
    if not config.smoothing:
        return w
    return np.clip(_smooth(w, config.energy_threshold, axis=0), 0.0, 1.0)


# -- full pipeline ------------------------------------------------------------------------


@dataclass
class PreparedData:
    config: PipelineConfig
    normalizer: NormalizationParams
    windows: WindowSet
    fit_fraction: float
    steps: list[TimeStep]


def prepare_training_data(
    trace: Sequence[BlockRecord],
    eth_prices: Sequence[EthPricePoint],
    config: PipelineConfig = PipelineConfig(),
    fit_fraction: float = 0.7,
) -> PreparedData:
    """Run the training pipeline.

    Outlier removal and normalizer fitting see only the first
    ``fit_fraction`` of the step grid; the remainder is normalized with the
    stored parameters.
    """
    if not 0 < fit_fraction < 1:
        raise ArgumentError("fit_fraction must lie in (0, 1)")
    steps = aggregate_steps(trace, eth_prices, config)
    n_fit = int(len(steps) * fit_fraction)
    if n_fit <= config.lag_steps + 1:
        raise ArgumentError(
            f"training portion of {n_fit} steps is too short for a {config.lag_steps}-step lag"
        )
    steps = remove_outliers(steps[:n_fit], config.outlier_k) + list(steps[n_fit:])
    lagged = add_lag(steps, config.lag_steps)
    params = fit_normalizer(lagged[: n_fit - config.lag_steps])
    x, y = normalize(lagged, params)
    windows = make_windows(
        x,
        y,
        config.window_length,
        config.horizon,
        config.smoothing,
        config.energy_threshold,
        first_index=lagged[0].index,
    )
    return PreparedData(config, params, windows, fit_fraction, lagged)


def inference_arrays(
    trace: Sequence[BlockRecord],
    eth_prices: Sequence[EthPricePoint],
    config: PipelineConfig,
    params: NormalizationParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized features, step indices, and step end timestamps for a trace.

    No points are deleted on this path.
    """
    steps = add_lag(aggregate_steps(trace, eth_prices, config), config.lag_steps)
    x, _ = steps_to_arrays(steps)
    index = np.array([s.index for s in steps], dtype=np.int64)
    return normalize_features(x, params), index, (index + 1) * config.step_seconds


# -- windows file -----------------------------------------------------------------------

WINDOWS_FORMAT = "gasrec-windows-v1"


def save_windows(path, data: PreparedData) -> None:
    """Write windows as ``.npz``: arrays ``inputs``, ``targets``, ``end_index``
    and ``header`` (UTF-8 JSON with config and normalization parameters)."""
    header = {
        "format": WINDOWS_FORMAT,
        "features": list(FEATURE_NAMES),
        "pipeline": data.config.to_dict(),
        "normalizer": data.normalizer.to_dict(),
        "fit_fraction": data.fit_fraction,
    }
    raw = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=raw,
            inputs=data.windows.inputs,
            targets=data.windows.targets,
            end_index=data.windows.end_index,
        )


def load_windows(path) -> tuple[WindowSet, PipelineConfig, NormalizationParams, float]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode())
            windows = WindowSet(z["inputs"], z["targets"], z["end_index"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read windows file {path}: {exc}") from exc
    if header.get("format") != WINDOWS_FORMAT:
        raise DataError(f"{path}: unsupported windows format {header.get('format')!r}")
    return (
        windows,
        PipelineConfig(**header["pipeline"]),
        NormalizationParams.from_dict(header["normalizer"]),
        float(header["fit_fraction"]),
    )
