import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gasrec.errors import ArgumentError, DataError, FitError
from gasrec.features import (
    FEATURE_NAMES,
    NormalizationParams,
    PipelineConfig,
    TimeStep,
    add_lag,
    aggregate_steps,
    denormalize,
    fit_normalizer,
    fourier_smooth,
    load_windows,
    make_windows,
    normalize,
    normalize_features,
    normalize_targets,
    outlier_mask,
    prepare_training_data,
    remove_outliers,
    save_windows,
)
from gasrec.ingest import BlockTrace, EthPricePoint
from gasrec import synthetic

from conftest import make_block

PRICES = [EthPricePoint(0, 150.0)]
CFG = PipelineConfig()


def _step(i, y, avg=None):
    avg = y if avg is None else avg
    return TimeStep(i, i * 300, avg, 1.0, y, y, 150.0, y)


# -- aggregation --------------------------------------------------------------------


def test_step_target_is_mean_of_block_minima():
    trace = BlockTrace([make_block(i, 600 + 10 * i, m) for i, m in enumerate([3, 5, 7])])
    (step,) = aggregate_steps(BlockTrace(list(trace) + [make_block(3, 900, 1)]), PRICES)[:1]
    assert step.target == 5.0
    assert step.min_gas_price == 5.0
    assert step.index == 2 and step.start_ts == 600


def test_empty_step_is_interpolated_and_flagged():
    trace = BlockTrace([make_block(0, 0, 4), make_block(1, 650, 6)])
    steps = aggregate_steps(trace, PRICES)
    assert [s.target for s in steps] == [4.0, 5.0, 6.0]
    assert [s.synthetic for s in steps] == [False, True, False]


def test_step_with_only_empty_blocks_is_interpolated():
    trace = BlockTrace([make_block(0, 0, 4), make_block(1, 310), make_block(2, 650, 6)])
    steps = aggregate_steps(trace, PRICES)
    assert steps[1].target == 5.0 and steps[1].synthetic
    # tx_count still averages over the empty block
    assert steps[1].tx_count == 0.0


def test_single_block_step():
    trace = BlockTrace([make_block(0, 10, 2.5, tx_count=3), make_block(1, 400, 9)])
    s = aggregate_steps(trace, PRICES)[0]
    assert (s.target, s.tx_count) == (2.5, 3.0)


def test_trace_shorter_than_a_step():
    with pytest.raises(ArgumentError):
        aggregate_steps(BlockTrace([make_block(0, 0, 1), make_block(1, 299, 1)]), PRICES)


def test_eth_price_carried_forward_at_step_start():
    prices = [EthPricePoint(0, 100.0), EthPricePoint(299, 200.0), EthPricePoint(301, 300.0)]
    trace = BlockTrace([make_block(0, 0, 1), make_block(1, 320, 1)])
    assert [s.eth_price for s in aggregate_steps(trace, prices)] == [100.0, 200.0]


# -- lag ------------------------------------------------------------------------------


def test_lag_on_constant_series():
    steps = add_lag([_step(i, 7.0) for i in range(300)], 288)
    assert all(s.avg_gas_price_lag == s.avg_gas_price for s in steps)


def test_lag_drops_first_steps():
    assert len(add_lag([_step(i, 1.0) for i in range(1000)], CFG.lag_steps)) == 1000 - 288


def test_lag_on_ramp():
    steps = add_lag([_step(t, float(t + 1), avg=float(t)) for t in range(400)], 288)
    for s in steps:
        assert s.avg_gas_price_lag == s.index - 288


def test_lag_too_short():
    with pytest.raises(ArgumentError):
        add_lag([_step(i, 1.0) for i in range(288)], 288)


# -- outliers -------------------------------------------------------------------------


def test_outliers_all_equal_unchanged():
    steps = [_step(i, 3.0) for i in range(10)]
    assert remove_outliers(steps, 1.5) == steps


def test_outlier_spike_fixture():
    values = [0.0] * 99 + [1000.0]
    # brute-force population moments
    mean = sum(values) / 100
    std = math.sqrt(sum((v - mean) ** 2 for v in values) / 100)
    assert mean == 10.0 and std == pytest.approx(99.4987, abs=1e-4)
    mask = outlier_mask(values, 1.5)
    assert mask.tolist() == [False] * 99 + [True]


def test_outlier_removed_and_refilled():
    ys = [2.0] * 20
    ys[10] = 500.0
    out = remove_outliers([_step(i, y) for i, y in enumerate(ys)], 1.5)
    assert out[10].target == 2.0 and out[10].synthetic
    assert out[10].max_gas_price == 2.0


def test_outliers_infinite_k_unchanged():
    steps = [_step(i, float(v)) for i, v in enumerate([1, 1, 1, 900])]
    assert remove_outliers(steps, math.inf) == steps


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 1e4), min_size=3, max_size=60))
def test_outliers_output_bounded(ys):
    y = np.array(ys)
    mean, std = y.mean(), y.std()
    mask = outlier_mask(y, 1.5)
    if mask.all():
        return
    out = remove_outliers([_step(i, v) for i, v in enumerate(ys)], 1.5)
    for s, m in zip(out, mask):
        if not m:
            assert abs(s.target - mean) <= 1.5 * std


# -- normalization --------------------------------------------------------------------


def _lagged(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return [
        TimeStep(i, i * 300, *rng.uniform(1, 50, 5).tolist(), float(rng.uniform(1, 50)), avg_gas_price_lag=float(rng.uniform(1, 50)))
        for i in range(n)
    ]


def test_normalizer_maps_extremes():
    steps = _lagged()
    params = fit_normalizer(steps)
    x, y = normalize(steps, params)
    assert x.min(axis=0).tolist() == [0.0] * 6
    assert x.max(axis=0).tolist() == [1.0] * 6
    assert (y.min(), y.max()) == (0.0, 1.0)


def test_normalizer_clamps_out_of_range():
    params = fit_normalizer(_lagged())
    above = np.array(params.feature_max) + 10
    below = np.array(params.feature_min) - 10
    assert normalize_features(above, params).tolist() == [1.0] * 6
    assert normalize_features(below, params).tolist() == [0.0] * 6


def test_constant_dimension_named():
    steps = [s.__class__(**{**s.__dict__, "eth_price": 150.0}) for s in _lagged()]
    with pytest.raises(FitError, match="eth_price"):
        fit_normalizer(steps)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e4), arrays(float, 8, elements=st.floats(0, 1)))
def test_denormalize_inverts_normalize(lo, width, u):
    params = NormalizationParams((0.0,) * 6, (1.0,) * 6, lo, lo + width)
    y = np.clip(lo + u * width, lo, lo + width)
    back = denormalize(normalize_targets(y, params), params)
    np.testing.assert_allclose(back, y, rtol=1e-9, atol=1e-9 * max(1.0, abs(lo)))


# -- Fourier smoothing ----------------------------------------------------------------


def _naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def _naive_smooth(x, theta):
    """Reference: O(n^2) DFT, keep lowest |k| pairs until the energy threshold."""
    n = len(x)
    X = _naive_dft(x)
    energy = np.abs(X) ** 2
    total = energy.sum()
    keep = np.zeros(n, dtype=bool)
    kept = 0.0
    for f in range(n // 2 + 1):
        for k in {f, (n - f) % n}:
            keep[k] = True
        kept = energy[keep].sum()
        if kept >= theta * total:
            break
    Y = np.where(keep, X, 0)
    idx = np.arange(n)
    return (np.exp(2j * np.pi * np.outer(idx, idx) / n) @ Y / n).real


def test_theta_one_is_identity():
    x = np.random.default_rng(0).normal(size=72)
    np.testing.assert_allclose(fourier_smooth(x, 1.0), x, atol=1e-9)


def test_constant_vector_unchanged():
    for theta in (0.1, 0.5, 0.95, 1.0):
        np.testing.assert_allclose(fourier_smooth(np.full(31, 4.2), theta), 4.2, atol=1e-12)


def test_high_frequency_tone_removed():
    n = 72
    t = np.arange(n)
    clean = np.sin(2 * np.pi * t / n)
    noisy = clean + 0.01 * np.sin(2 * np.pi * 30 * t / n)
    out = fourier_smooth(noisy, 0.95)
    np.testing.assert_allclose(out, _naive_smooth(noisy, 0.95), atol=1e-9)
    assert np.corrcoef(out, clean)[0, 1] > 0.999
    np.testing.assert_allclose(out, clean, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(
    arrays(float, st.integers(2, 40), elements=st.floats(-100, 100)),
    st.floats(0.05, 1.0),
)
def test_smoothing_matches_naive_and_keeps_energy(x, theta):
    out = fourier_smooth(x, theta)
    np.testing.assert_allclose(out, _naive_smooth(x, theta), atol=1e-7)
    assert out.mean() == pytest.approx(x.mean(), abs=1e-9)
    total = np.sum(np.abs(np.fft.fft(x)) ** 2)
    kept = np.sum(np.abs(np.fft.fft(out)) ** 2)
    assert kept >= theta * total * (1 - 1e-9) - 1e-9


def test_theta_out_of_range():
    for theta in (0.0, -1.0, 1.5):
        with pytest.raises(ArgumentError):
            fourier_smooth([1.0, 2.0], theta)


# -- windows --------------------------------------------------------------------------


def test_window_counts():
    assert len(make_windows(np.zeros((84, 6)), np.zeros(84), 72, 12)) == 1
    assert len(make_windows(np.zeros((100, 6)), np.zeros(100), 72, 12)) == 17
    assert len(make_windows(np.zeros((83, 6)), np.zeros(83), 72, 12)) == 0


def test_window_indexing_on_ramp():
    n = 100
    y = np.arange(n) / n
    x = np.tile(y[:, None], (1, 6))
    ws = make_windows(x, y, 72, 12, apply_smoothing=False)
    np.testing.assert_array_equal(ws[0].targets, y[72:84])
    np.testing.assert_array_equal(ws[0].inputs[:, 0], y[:72])
    np.testing.assert_array_equal(ws[16].targets, y[88:100])
    assert ws[0].end_index == 71


def test_smoothing_touches_inputs_not_targets():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(90, 6)), rng.uniform(size=90)
    raw = make_windows(x, y, 20, 5, apply_smoothing=False)
    sm = make_windows(x, y, 20, 5, apply_smoothing=True, theta=0.6)
    np.testing.assert_array_equal(raw.targets, sm.targets)
    assert not np.array_equal(raw.inputs, sm.inputs)
    expected = np.clip(fourier_smooth(raw.inputs[3][:, 2], 0.6), 0, 1)
    np.testing.assert_allclose(sm.inputs[3][:, 2], expected, atol=1e-12)


# -- full pipeline --------------------------------------------------------------------


def _small_trace(days=3):
    tr = synthetic.synthetic_trace(
        days * 1440, synthetic.sine_level(20, 10, 86400), block_seconds=60, noise_sigma=0.2, seed=4
    )
    return tr, synthetic.synthetic_eth_prices(tr[0].timestamp, tr[-1].timestamp)


def test_pipeline_deterministic_and_bounded():
    tr, px = _small_trace()
    cfg = PipelineConfig(window_length=24, horizon=6)
    a = prepare_training_data(tr, px, cfg)
    b = prepare_training_data(tr, px, cfg)
    assert a.windows.inputs.tobytes() == b.windows.inputs.tobytes()
    assert a.windows.targets.tobytes() == b.windows.targets.tobytes()
    n_fit = int(len(aggregate_steps(tr, px, cfg)) * 0.7) - cfg.lag_steps
    train_inputs = a.windows.inputs[a.windows.end_index + cfg.horizon < a.steps[0].index + n_fit]
    assert train_inputs.min() >= 0 and train_inputs.max() <= 1
    assert a.windows.inputs.shape[1:] == (24, len(FEATURE_NAMES))


def test_windows_file_round_trip(tmp_path):
    tr, px = _small_trace()
    data = prepare_training_data(tr, px, PipelineConfig(window_length=24, horizon=6))
    save_windows(tmp_path / "w.npz", data)
    ws, cfg, params, frac = load_windows(tmp_path / "w.npz")
    assert cfg == data.config and params == data.normalizer and frac == 0.7
    np.testing.assert_array_equal(ws.inputs, data.windows.inputs)
    np.testing.assert_array_equal(ws.end_index, data.windows.end_index)


def test_windows_file_garbage(tmp_path):
    (tmp_path / "w.npz").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_windows(tmp_path / "w.npz")


def test_config_rejects_bad_lag():
    with pytest.raises(ArgumentError):
        PipelineConfig(lag_steps=100)
    with pytest.raises(ArgumentError):
        PipelineConfig(energy_threshold=0)
    assert PipelineConfig(step_seconds=1800).lag_steps == 48
