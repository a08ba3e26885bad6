"""Single-layer GRU with a linear head, trained with BPTT and Adam.

Everything is plain numpy. Inputs are ``(l, d)`` windows or ``(B, l, d)``
batches; the model maps a window to ``s`` normalized future targets::

    z_t = sigmoid(W_z d_t + V_z h_{t-1} + b_z)
    r_t = sigmoid(W_r d_t + V_r h_{t-1} + b_r)
    h_t = z_t * h_{t-1} + (1 - z_t) * tanh(W_h d_t + V_h (r_t * h_{t-1}) + b_h)
    y   = W_o h_l + b_o
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, GasrecError, ModelLoadError, TrainingError
from .features import FEATURE_NAMES, NormalizationParams, WindowSet

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W_z", "W_r", "W_h", "V_z", "V_r", "V_h", "b_z", "b_r", "b_h", "W_o", "b_o")


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class GruModel:
    input_size: int
    hidden_size: int
    horizon: int
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    V_z: np.ndarray
    V_r: np.ndarray
    V_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        for name, shape in self.shapes().items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ArgumentError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ArgumentError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, s = self.input_size, self.hidden_size, self.horizon
        return {
            "W_z": (h, d), "W_r": (h, d), "W_h": (h, d),
            "V_z": (h, h), "V_r": (h, h), "V_h": (h, h),
            "b_z": (h,), "b_r": (h,), "b_h": (h,),
            "W_o": (s, h), "b_o": (s,),
        }  # fmt: skip

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_parameters(self, params: dict[str, np.ndarray]) -> "GruModel":
        return GruModel(self.input_size, self.hidden_size, self.horizon, **params)

    def copy(self) -> "GruModel":
        return self.with_parameters({k: v.copy() for k, v in self.parameters().items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, GruModel):
            return NotImplemented
        if (self.input_size, self.hidden_size, self.horizon) != (
            other.input_size, other.hidden_size, other.horizon,
        ):
            return False
        return all(
            np.array_equal(a, b) for a, b in zip(self.parameters().values(), other.parameters().values())
        )

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())


def init_model(
    hidden_size: int = 64,
    horizon: int = 12,
    input_size: int = len(FEATURE_NAMES),
    rng: np.random.Generator | int | None = 0,
) -> GruModel:
    """Draw every weight and bias uniformly from +-1/sqrt(hidden_size)."""
    if min(hidden_size, horizon, input_size) < 1:
        raise ArgumentError("model dimensions must be positive")
    rng = np.random.default_rng(rng)
    bound = 1.0 / math.sqrt(hidden_size)
    stub = GruModel.__new__(GruModel)
    stub.input_size, stub.hidden_size, stub.horizon = input_size, hidden_size, horizon
    params = {n: rng.uniform(-bound, bound, size=shape) for n, shape in stub.shapes().items()}
    return GruModel(input_size, hidden_size, horizon, **params)


def zero_model(hidden_size: int, horizon: int, input_size: int = len(FEATURE_NAMES)) -> GruModel:
    stub = GruModel.__new__(GruModel)
    stub.input_size, stub.hidden_size, stub.horizon = input_size, hidden_size, horizon
    return GruModel(
        input_size, hidden_size, horizon, **{n: np.zeros(s) for n, s in stub.shapes().items()}
    )


# -- forward / backward -------------------------------------------------------------


@dataclass
class ForwardCache:
    model: GruModel
    batched: bool
    x: np.ndarray  # (B, l, d)
    h: np.ndarray  # (B, l+1, H), h[:, 0] = 0
    z: np.ndarray  # (B, l, H)
    r: np.ndarray
    hh: np.ndarray  # candidate state tanh(...)


def _as_batch(model: GruModel, inputs) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.input_size or x.shape[1] < 1:
        raise ArgumentError(
            f"inputs must be (l, {model.input_size}) or (B, l, {model.input_size}), "
            f"got {np.shape(inputs)}"
        )
    if not np.all(np.isfinite(x)):
        raise ArgumentError("inputs contain non-finite values")
    return x, batched


def gru_forward(model: GruModel, inputs) -> tuple[np.ndarray, ForwardCache]:
    """Run the recurrence from h_0 = 0 and apply the output layer."""
    x, batched = _as_batch(model, inputs)
    B, L, _ = x.shape
    H = model.hidden_size
    W = np.concatenate([model.W_z, model.W_r, model.W_h])
    b = np.concatenate([model.b_z, model.b_r, model.b_h])
    xp = x @ W.T + b  # (B, L, 3H)
    Vzr = np.concatenate([model.V_z, model.V_r])
    h = np.zeros((B, L + 1, H))
    z = np.empty((B, L, H))
    r = np.empty((B, L, H))
    hh = np.empty((B, L, H))
    for t in range(L):
        hp = h[:, t]
        g = sigmoid(xp[:, t, : 2 * H] + hp @ Vzr.T)
        z[:, t], r[:, t] = g[:, :H], g[:, H:]
        hh[:, t] = np.tanh(xp[:, t, 2 * H :] + (r[:, t] * hp) @ model.V_h.T)
        h[:, t + 1] = z[:, t] * hp + (1.0 - z[:, t]) * hh[:, t]
    y = h[:, L] @ model.W_o.T + model.b_o
    cache = ForwardCache(model, batched, x, h, z, r, hh)
    return (y if batched else y[0]), cache


def gru_backward(model: GruModel, cache: ForwardCache, grad_output) -> dict[str, np.ndarray]:
    """Backpropagate ``dLoss/dy`` through the output layer and all l steps."""
    if cache.model is not model:
        raise GasrecError("forward cache belongs to a different model")
    dy = np.asarray(grad_output, dtype=np.float64)
    if not cache.batched:
        dy = dy[None]
    B, L, H = cache.z.shape
    if dy.shape != (B, model.horizon):
        raise GasrecError(f"gradient shape {dy.shape} does not match the cached forward pass")
    h, z, r, hh, x = cache.h, cache.z, cache.r, cache.hh, cache.x
    grads = {"W_o": dy.T @ h[:, L], "b_o": dy.sum(axis=0)}
    dh = dy @ model.W_o
    Vzr = np.concatenate([model.V_z, model.V_r])
    da_zr = np.empty((B, L, 2 * H))
    da_h = np.empty((B, L, H))
    for t in range(L - 1, -1, -1):
        hp = h[:, t]
        zt, rt, hht = z[:, t], r[:, t], hh[:, t]
        ah = dh * (1.0 - zt) * (1.0 - hht * hht)
        drh = ah @ model.V_h
        da_h[:, t] = ah
        da_zr[:, t, :H] = dh * (hp - hht) * zt * (1.0 - zt)
        da_zr[:, t, H:] = drh * hp * rt * (1.0 - rt)
        dh = dh * zt + drh * rt + da_zr[:, t] @ Vzr
    # sum over batch and time as one matmul each
    xf = x.reshape(B * L, -1)
    hprev = h[:, :L].reshape(B * L, H)
    zr = da_zr.reshape(B * L, 2 * H)
    ah_all = da_h.reshape(B * L, H)
    gx_zr = zr.T @ xf
    gh_zr = zr.T @ hprev
    grads["W_z"], grads["W_r"] = gx_zr[:H], gx_zr[H:]
    grads["V_z"], grads["V_r"] = gh_zr[:H], gh_zr[H:]
    grads["W_h"] = ah_all.T @ xf
    grads["V_h"] = ah_all.T @ (r.reshape(B * L, H) * hprev)
    b_zr = da_zr.sum(axis=(0, 1))
    grads["b_z"], grads["b_r"] = b_zr[:H], b_zr[H:]
    grads["b_h"] = da_h.sum(axis=(0, 1))
    return {name: grads[name] for name in PARAM_NAMES}


def predict(model: GruModel, inputs, chunk_size: int = 512) -> np.ndarray:
    """Forward pass without keeping the cache, in chunks to bound memory."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3:
        return gru_forward(model, x)[0]
    if len(x) == 0:
        return np.zeros((0, model.horizon))
    return np.concatenate(
        [gru_forward(model, x[i : i + chunk_size])[0] for i in range(0, len(x), chunk_size)]
    )


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ArgumentError(f"length mismatch: {p.shape} vs {y.shape}")
    return float(np.mean((p - y) ** 2))


def mse_grad(predictions, targets) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ArgumentError(f"length mismatch: {p.shape} vs {y.shape}")
    return 2.0 * (p - y) / p.size


# -- optimizer ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    split: float = 0.7
    hidden_size: int = 64
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be positive")
        if not 0 < self.split < 1:
            raise ArgumentError("split must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ArgumentError("invalid Adam hyperparameters")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden_size < 1:
            raise ArgumentError("epochs, batch_size and hidden_size must be non-negative/positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ArgumentError("clip_norm must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})  # fmt: skip


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig = TrainConfig(),
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**t)
        v_hat = v[name] / (1 - b2**t)
        new_params[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return new_params, AdamState(m, v, t)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# -- training ----------------------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    seconds: float = 0.0

    @property
    def best_val_loss(self) -> float | None:
        return None if self.best_epoch is None else self.val_loss[self.best_epoch]


def split_windows(samples: WindowSet, split: float) -> tuple[WindowSet, WindowSet]:
    """Chronological split: the first ``split`` fraction trains, the rest validates."""
    n_train = int(len(samples) * split)
    if n_train < 1 or len(samples) - n_train < 1:
        raise ArgumentError(
            f"{len(samples)} windows give an empty train or validation split at {split}"
        )
    return samples[:n_train], samples[n_train:]


def evaluate(model: GruModel, samples: WindowSet) -> float:
    return mse_loss(predict(model, samples.inputs), samples.targets)


def train(
    samples: WindowSet, config: TrainConfig = TrainConfig(), model: GruModel | None = None
) -> tuple[GruModel, TrainReport]:
    """Mini-batch Adam training; returns the parameters with the lowest
    validation loss. Deterministic given ``config.seed``."""
    train_set, val_set = split_windows(samples, config.split)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_model(
            config.hidden_size, samples.targets.shape[1], samples.inputs.shape[2], rng
        )
    report = TrainReport()
    started = time.perf_counter()
    best = model
    best_loss = math.inf
    params = model.parameters()
    state = AdamState.zeros_like(params)
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = train_set.inputs[idx], train_set.targets[idx]
            pred, cache = gru_forward(model, xb)
            loss = mse_loss(pred, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}")
            grads = gru_backward(model, cache, mse_grad(pred, yb))
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            params, state = adam_step(params, grads, state, config)
            model = model.with_parameters(params)
            total += loss * len(idx)
        report.train_loss.append(total / n)
        val = evaluate(model, val_set)
        report.val_loss.append(val)
        if val < best_loss:
            best_loss, best, report.best_epoch = val, model, epoch
        logger.info("epoch %d train %.6f val %.6f", epoch, report.train_loss[-1], val)
    report.seconds = time.perf_counter() - started
    return best, report


# -- persistence ----------------------------------------------------------------------------
#
# Layout (all little-endian):
#   6 bytes   magic b"GRECv1"
#   3 x u32   input_size, hidden_size, horizon
#   u32       n_norm (= input_size + 1); n_norm x (f64 min, f64 max), features
#             first, target last
#   f64 data  parameters in PARAM_NAMES order, C order
#   u32       metadata length, then UTF-8 JSON metadata
#   u32       CRC-32 of all preceding bytes

MAGIC = b"GRECv1"


def save_model(
    model: GruModel, normalizer: NormalizationParams, path, metadata: dict | None = None
) -> None:
    parts = [MAGIC, struct.pack("<3I", model.input_size, model.hidden_size, model.horizon)]
    pairs = list(zip(normalizer.feature_min, normalizer.feature_max))
    pairs.append((normalizer.target_min, normalizer.target_max))
    parts.append(struct.pack("<I", len(pairs)))
    parts.extend(struct.pack("<2d", lo, hi) for lo, hi in pairs)
    for name in PARAM_NAMES:
        parts.append(getattr(model, name).astype("<f8").tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    blob = b"".join(parts)
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelLoadError("model file is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_model_bundle(path) -> tuple[GruModel, NormalizationParams, dict]:
    """Load model, normalizer and metadata written by :func:`save_model`."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelLoadError(f"cannot read model file {path}: {exc}") from exc
    if len(data) < len(MAGIC) or not data.startswith(b"GREC"):
        raise ModelLoadError(f"{path} is not a gasrec model file")
    if not data.startswith(MAGIC):
        raise ModelLoadError(f"unsupported model version {data[:6]!r}, expected {MAGIC!r}")
    if len(data) < len(MAGIC) + 4:
        raise ModelLoadError("model file is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    rd = _Reader(body)
    rd.take(len(MAGIC))
    try:
        d, h, s = struct.unpack("<3I", rd.take(12))
        (n_norm,) = struct.unpack("<I", rd.take(4))
        if n_norm != d + 1:
            raise ModelLoadError(f"normalizer has {n_norm} entries for input size {d}")
        pairs = [struct.unpack("<2d", rd.take(16)) for _ in range(n_norm)]
        stub = GruModel.__new__(GruModel)
        stub.input_size, stub.hidden_size, stub.horizon = d, h, s
        params = {}
        for name, shape in stub.shapes().items():
            count = int(np.prod(shape))
            params[name] = np.frombuffer(rd.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        (meta_len,) = struct.unpack("<I", rd.take(4))
        meta = json.loads(rd.take(meta_len).decode())
    except ModelLoadError:
        raise
    except (struct.error, ValueError) as exc:
        raise ModelLoadError(f"corrupt model file: {exc}") from exc
    if rd.pos != len(body):
        raise ModelLoadError("trailing bytes in model file")
    if zlib.crc32(body) != crc:
        raise ModelLoadError("model file checksum mismatch")
    try:
        model = GruModel(d, h, s, **params)
        normalizer = NormalizationParams(
            tuple(p[0] for p in pairs[:-1]), tuple(p[1] for p in pairs[:-1]), *pairs[-1]
        )
    except GasrecError as exc:
        raise ModelLoadError(f"invalid model contents: {exc}") from exc
    return model, normalizer, meta


def load_model(path) -> tuple[GruModel, NormalizationParams]:
    model, normalizer, _ = load_model_bundle(path)
    return model, normalizer
