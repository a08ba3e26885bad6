import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gasrec.errors import ArgumentError, GasrecError, ModelLoadError, TrainingError
from gasrec.features import NormalizationParams, WindowSet
from gasrec.forecast import (
    PARAM_NAMES,
    AdamState,
    TrainConfig,
    adam_step,
    clip_gradients,
    gru_backward,
    gru_forward,
    init_model,
    load_model,
    load_model_bundle,
    mse_grad,
    mse_loss,
    predict,
    save_model,
    split_windows,
    train,
    zero_model,
)

from oracles import finite_difference_grads, gradient_check, relative_error

NORM = NormalizationParams((0.0,) * 6, (1.0,) * 6, 1.0, 30.0)


# -- forward ---------------------------------------------------------------------------


def test_zero_model_outputs_bias():
    m = zero_model(5, 3)
    y, cache = gru_forward(m, np.random.default_rng(0).normal(size=(7, 6)))
    np.testing.assert_array_equal(y, np.zeros(3))
    assert np.all(cache.z == 0.5) and np.all(cache.r == 0.5)
    assert np.all(cache.h == 0.0)


def test_single_step_closed_form():
    m = zero_model(1, 2)
    m.b_z[:] = -50.0
    m.W_h[0, 0] = 1.0
    m.W_o[:] = 1.0
    for x in (-2.0, -0.3, 0.0, 0.7, 1.9):
        d = np.array([[x, 0, 0, 0, 0, 0]], dtype=float)
        y, cache = gru_forward(m, d)
        assert abs(cache.h[0, 1, 0] - math.tanh(x)) < 1e-9
        np.testing.assert_allclose(y, math.tanh(x), atol=1e-9)


def test_output_length_and_batching():
    m = init_model(4, 5, rng=1)
    x = np.random.default_rng(2).uniform(size=(3, 9, 6))
    yb, _ = gru_forward(m, x)
    assert yb.shape == (3, 5)
    for i in range(3):
        np.testing.assert_allclose(gru_forward(m, x[i])[0], yb[i], atol=1e-14)
    np.testing.assert_allclose(predict(m, x, chunk_size=2), yb, atol=1e-14)


def test_forward_rejects_bad_inputs():
    m = init_model(4, 2)
    with pytest.raises(ArgumentError):
        gru_forward(m, np.zeros((5, 4)))
    with pytest.raises(ArgumentError):
        gru_forward(m, np.full((5, 6), np.nan))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 30))
def test_hidden_state_and_gates_bounded(seed, hidden, length):
    rng = np.random.default_rng(seed)
    m = init_model(hidden, 2, rng=rng)
    scaled = m.with_parameters({k: v * rng.uniform(0.5, 3) for k, v in m.parameters().items()})
    _, cache = gru_forward(scaled, rng.uniform(0, 1, (length, 6)))
    assert np.all(np.abs(cache.h) < 1)
    for gate in (cache.z, cache.r):
        assert np.all((gate > 0) & (gate < 1))


# -- loss -------------------------------------------------------------------------------


def test_mse_examples():
    assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse_loss([2.0, 3.0], [1.0, 2.0]) == 1.0
    assert mse_loss([0.0, 2.0], [1.0, 0.0]) == 2.5
    with pytest.raises(ArgumentError):
        mse_loss([1.0], [1.0, 2.0])


# -- backward ------------------------------------------------------------------------------


def test_zero_upstream_gradient():
    m = init_model(4, 3, rng=0)
    _, cache = gru_forward(m, np.ones((5, 6)))
    grads = gru_backward(m, cache, np.zeros(3))
    assert all(not g.any() for g in grads.values())


def test_gradients_match_finite_differences():
    for seed in range(5):
        assert gradient_check(seed) < 1e-4


def test_output_bias_gradient_is_upstream_gradient():
    rng = np.random.default_rng(11)
    m = init_model(4, 3, rng=rng)
    x, y = rng.uniform(size=(5, 6)), rng.uniform(size=3)
    pred, cache = gru_forward(m, x)
    dy = mse_grad(pred, y)
    grads = gru_backward(m, cache, dy)
    np.testing.assert_array_equal(grads["b_o"], dy)
    assert relative_error(grads["b_o"], finite_difference_grads(m, x, y)["b_o"]) < 1e-6


def test_batched_gradient_is_sum_of_per_sample():
    rng = np.random.default_rng(5)
    m = init_model(3, 2, rng=rng)
    x, dy = rng.uniform(size=(4, 6, 6)), rng.normal(size=(4, 2))
    _, cache = gru_forward(m, x)
    batched = gru_backward(m, cache, dy)
    for name in PARAM_NAMES:
        total = sum(gru_backward(m, gru_forward(m, x[i])[1], dy[i])[name] for i in range(4))
        np.testing.assert_allclose(batched[name], total, atol=1e-12)


def test_stale_cache_rejected():
    a, b = init_model(2, 1, rng=0), init_model(2, 1, rng=0)
    _, cache = gru_forward(a, np.ones((3, 6)))
    with pytest.raises(GasrecError):
        gru_backward(b, cache, np.ones(1))


# -- Adam ------------------------------------------------------------------------------------


def _scalar(v):
    return {"w": np.array([v])}


def test_adam_zero_gradient():
    params, state = adam_step(_scalar(1.5), _scalar(0.0), AdamState.zeros_like(_scalar(0)))
    assert params["w"][0] == 1.5 and state.step == 1


@pytest.mark.parametrize("g", [0.3, -4.0, 1e-3])
def test_adam_first_step_closed_form(g):
    cfg = TrainConfig(learning_rate=0.01)
    params, _ = adam_step(_scalar(2.0), _scalar(g), AdamState.zeros_like(_scalar(0)), cfg)
    expected = 2.0 - cfg.learning_rate * g / (abs(g) + cfg.eps)
    assert params["w"][0] == pytest.approx(expected, rel=1e-12)


def test_adam_monotone_under_constant_gradient():
    p, state = _scalar(1.0), AdamState.zeros_like(_scalar(0))
    seen = [1.0]
    for _ in range(3):
        p, state = adam_step(p, _scalar(0.5), state)
        seen.append(p["w"][0])
    assert seen == sorted(seen, reverse=True) and len(set(seen)) == 4
    assert state.step == 3


def test_adam_rejects_non_finite():
    with pytest.raises(TrainingError):
        adam_step(_scalar(1.0), _scalar(math.nan), AdamState.zeros_like(_scalar(0)))


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_gradients(g, 1.0)
    assert math.hypot(clipped["a"][0], clipped["b"][0]) == pytest.approx(1.0)
    assert clip_gradients(g, 10.0) is g


# -- training ------------------------------------------------------------------------------------


def _linear_windows(n=60, length=8, horizon=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, length, 6))
    w = rng.uniform(-0.3, 0.3, 6)
    level = x[:, -1] @ w + 0.5
    y = level[:, None] + 0.05 * np.arange(horizon)
    return WindowSet(x, y, np.arange(n))


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=3, hidden_size=5, batch_size=8, seed=7)
    a, ra = train(_linear_windows(), cfg)
    b, rb = train(_linear_windows(), cfg)
    assert a == b
    assert ra.train_loss == rb.train_loss and ra.val_loss == rb.val_loss


def test_zero_epochs_returns_initial_model():
    cfg = TrainConfig(epochs=0, hidden_size=5, seed=3)
    model, report = train(_linear_windows(), cfg)
    assert model == init_model(5, 3, 6, np.random.default_rng(3))
    assert report.train_loss == [] and report.best_epoch is None


def test_loss_decreases_on_linear_target():
    cfg = TrainConfig(epochs=15, hidden_size=8, batch_size=8, learning_rate=5e-3)
    _, report = train(_linear_windows(), cfg)
    assert report.train_loss[-1] < report.train_loss[0]
    assert report.best_val_loss == min(report.val_loss)


def test_empty_split_is_argument_error():
    with pytest.raises(ArgumentError):
        split_windows(_linear_windows(n=1), 0.7)
    train_set, val_set = split_windows(_linear_windows(n=10), 0.7)
    assert (train_set.end_index.tolist(), val_set.end_index.tolist()) == (list(range(7)), [7, 8, 9])


# -- persistence -----------------------------------------------------------------------------------


def test_model_round_trip(tmp_path):
    m = init_model(64, 12, rng=9)
    save_model(m, NORM, tmp_path / "m.bin", {"note": "x"})
    loaded, norm, meta = load_model_bundle(tmp_path / "m.bin")
    assert loaded == m and loaded.hidden_size == 64
    assert norm == NORM and meta == {"note": "x"}
    assert (tmp_path / "m.bin").read_bytes()[:6] == b"GRECv1"


def test_truncated_model_file(tmp_path):
    save_model(init_model(4, 2), NORM, tmp_path / "m.bin")
    data = (tmp_path / "m.bin").read_bytes()
    for cut in (3, 10, 40, len(data) // 2, len(data) - 1):
        (tmp_path / "t.bin").write_bytes(data[:cut])
        with pytest.raises(ModelLoadError):
            load_model(tmp_path / "t.bin")


def test_version_and_checksum_errors(tmp_path):
    save_model(init_model(4, 2), NORM, tmp_path / "m.bin")
    data = bytearray((tmp_path / "m.bin").read_bytes())
    (tmp_path / "v.bin").write_bytes(b"GRECv2" + data[6:])
    with pytest.raises(ModelLoadError, match="version"):
        load_model(tmp_path / "v.bin")
    data[100] ^= 0xFF
    (tmp_path / "c.bin").write_bytes(bytes(data))
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "c.bin")
