"""GRU and CNN next-step load forecasters, plus the persistence baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .series import MinMaxScaler, TimeSeries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForecastConfig:
    seq_len: int = 24
    horizon: int = 1
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.01
    dropout: float = 0.2
    hidden: int = 64
    layers: int = 2
    filters: int = 64
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 1 or self.horizon < 1:
            raise ValueError("seq_len and horizon must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainReport:
    losses: list            # eval-mode training MSE; losses[0] is before the first epoch
    delta_t: float

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


@dataclass
class ForecastResult:
    predictions: np.ndarray
    train_time: float
    inference_time: float

    @property
    def delta_t(self) -> float:
        return self.train_time + self.inference_time


def make_windows(values, seq_len: int):
    """Overlapping ``(X, y)`` pairs: each row of ``X`` is ``seq_len`` values, ``y`` the next one."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n <= seq_len:
        raise ValueError(f"series of length {n} too short for windows of {seq_len}")
    X = np.lib.stride_tricks.sliding_window_view(values, seq_len)[:-1].copy()
    y = values[seq_len:].copy()
    return X, y


class NeuralForecaster:
    """Shared plumbing: parameter dict, scaler, batching and prediction."""

    kind = "base"

    def __init__(self, cfg: ForecastConfig, params: dict, scaler: MinMaxScaler | None = None):
        self.cfg = cfg
        self.params = params
        self.scaler = scaler

    # subclasses implement forward/backward over normalized windows (B, L)
    def forward(self, X, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dpred, cache) -> dict:
        raise NotImplementedError

    def loss_and_grads(self, X, y, training=False, rng=None):
        pred, cache = self.forward(X, training, rng)
        loss, dpred = nn.mse_loss(pred, y)
        return loss, self.backward(dpred, cache)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.forward(X, training=False)[0]

    def mse(self, X, y) -> float:
        return nn.mse_loss(self.predict(X), y)[0]

    def to_meta(self) -> dict:
        return {
            "kind": self.kind,
            "config": asdict(self.cfg),
            "scaler": None if self.scaler is None else [self.scaler.lo, self.scaler.hi],
        }


class GRUForecaster(NeuralForecaster):
    """Stacked GRU over the window, dropout on the final state, one linear output unit."""

    kind = "gru"

    @classmethod
    def init(cls, cfg: ForecastConfig, rng: np.random.Generator, scaler=None) -> "GRUForecaster":
        params = {}
        in_size = 1
        for li in range(cfg.layers):
            params.update(nn.GruParams.init(in_size, cfg.hidden, rng).as_dict(f"gru{li}."))
            in_size = cfg.hidden
        params["out.W"] = nn.uniform_init(rng, (1, cfg.hidden), cfg.hidden)
        params["out.b"] = nn.uniform_init(rng, 1, cfg.hidden)
        return cls(cfg, params, scaler)

    @property
    def layers(self):
        return [nn.GruParams.from_dict(self.params, f"gru{li}.") for li in range(self.cfg.layers)]

    def forward(self, X, training=False, rng=None):
        layers = self.layers
        h, caches = nn.gru_sequence_forward(X[:, :, None], layers, self.cfg.dropout, training, rng)
        hd, mask = nn.dropout_forward(h, self.cfg.dropout, rng, training)
        pred = nn.dense_forward(hd, self.params["out.W"], self.params["out.b"])[:, 0]
        return pred, (layers, caches, hd, mask)

    def features(self, X):
        """Final hidden state of the top layer (eval mode)."""
        return nn.gru_forward_sequence(np.atleast_2d(X)[:, :, None], self.layers)

    def backward(self, dpred, cache):
        layers, caches, hd, mask = cache
        dhd, dW, db = nn.dense_backward(dpred[:, None], hd, self.params["out.W"])
        grads = {"out.W": dW, "out.b": db}
        dh = nn.dropout_backward(dhd, mask)
        _, layer_grads = nn.gru_sequence_backward(dh, caches, layers)
        for li, g in enumerate(layer_grads):
            grads.update({f"gru{li}.{k}": v for k, v in g.items()})
        return grads


def cnn_shapes(seq_len: int, kernel: int = 3, pool: int = 2) -> list:
    """Lengths through conv->pool->conv->pool for a window of ``seq_len``."""
    l1 = seq_len - kernel + 1
    p1 = l1 // pool
    l2 = p1 - kernel + 1
    p2 = l2 // pool
    return [seq_len, l1, p1, l2, p2]


class CNNForecaster(NeuralForecaster):
    """Two conv(filters, kernel) -> ReLU -> maxpool(2) -> dropout blocks, flatten, dense -> 1."""

    kind = "cnn"

    @classmethod
    def init(cls, cfg: ForecastConfig, rng: np.random.Generator, scaler=None) -> "CNNForecaster":
        F, w = cfg.filters, cfg.kernel
        flat = F * cnn_shapes(cfg.seq_len, w)[-1]
        if flat <= 0:
            raise ValueError(f"seq_len {cfg.seq_len} too short for two conv/pool blocks")
        params = {
            "conv1.W": nn.uniform_init(rng, (F, 1, w), w),
            "conv1.b": nn.uniform_init(rng, F, w),
            "conv2.W": nn.uniform_init(rng, (F, F, w), F * w),
            "conv2.b": nn.uniform_init(rng, F, F * w),
            "out.W": nn.uniform_init(rng, (1, flat), flat),
            "out.b": nn.uniform_init(rng, 1, flat),
        }
        return cls(cfg, params, scaler)

    def forward(self, X, training=False, rng=None):
        p, drop = self.params, self.cfg.dropout
        a1, c1 = nn.conv1d_forward(X[:, None, :], p["conv1.W"], p["conv1.b"])
        r1 = nn.relu(a1)
        m1, pc1 = nn.maxpool1d_forward(r1)
        d1, mask1 = nn.dropout_forward(m1, drop, rng, training)
        a2, c2 = nn.conv1d_forward(d1, p["conv2.W"], p["conv2.b"])
        r2 = nn.relu(a2)
        m2, pc2 = nn.maxpool1d_forward(r2)
        d2, mask2 = nn.dropout_forward(m2, drop, rng, training)
        flat = d2.reshape(d2.shape[0], -1)
        pred = nn.dense_forward(flat, p["out.W"], p["out.b"])[:, 0]
        return pred, (c1, a1, pc1, mask1, c2, a2, pc2, mask2, flat, d2.shape)

    def backward(self, dpred, cache):
        c1, a1, pc1, mask1, c2, a2, pc2, mask2, flat, shape2 = cache
        dflat, dWo, dbo = nn.dense_backward(dpred[:, None], flat, self.params["out.W"])
        d = nn.dropout_backward(dflat.reshape(shape2), mask2)
        d = nn.relu_backward(nn.maxpool1d_backward(d, pc2), a2)
        d, dW2, db2 = nn.conv1d_backward(d, c2)
        d = nn.dropout_backward(d, mask1)
        d = nn.relu_backward(nn.maxpool1d_backward(d, pc1), a1)
        _, dW1, db1 = nn.conv1d_backward(d, c1)
        return {"conv1.W": dW1, "conv1.b": db1, "conv2.W": dW2, "conv2.b": db2,
                "out.W": dWo, "out.b": dbo}


MODEL_CLASSES = {"gru": GRUForecaster, "cnn": CNNForecaster}


def fit_windows(model: NeuralForecaster, X, y, cfg: ForecastConfig,
                rng: np.random.Generator | None = None) -> list:
    """Mini-batch Adam on MSE in chronological batch order.

    Returns eval-mode training MSE before training and after each epoch.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
    opt = nn.Adam(lr=cfg.lr)
    losses = [model.mse(X, y)]
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        for start in range(0, n, cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            loss, grads = model.loss_and_grads(X[sl], y[sl], training=True, rng=rng)
            if not np.isfinite(loss):
                raise nn.DivergenceError(f"diverged: loss is {loss} in epoch {epoch}")
            opt.step(model.params, grads)
        losses.append(model.mse(X, y))
        log.debug("%s epoch %d mse %.6g", model.kind, epoch + 1, losses[-1])
    return losses


def train_model(kind: str, train: TimeSeries, cfg: ForecastConfig = ForecastConfig()):
    """Fit a scaler on ``train``, build windows and train a ``gru``/``cnn`` forecaster."""
    t0 = time.perf_counter()
    scaler = MinMaxScaler.fit(train.values, allow_constant=True)
    X, y = make_windows(scaler.transform(train.values), cfg.seq_len)
    rng = np.random.default_rng(cfg.seed)
    model = MODEL_CLASSES[kind].init(cfg, rng, scaler)
    losses = fit_windows(model, X, y, cfg, rng)
    return model, TrainReport(losses, time.perf_counter() - t0)


def train_gru(train: TimeSeries, cfg: ForecastConfig = ForecastConfig()):
    return train_model("gru", train, cfg)


def train_cnn(train: TimeSeries, cfg: ForecastConfig = ForecastConfig()):
    return train_model("cnn", train, cfg)


def forecast_recursive(model, last_window, horizon: int) -> np.ndarray:
    """Roll a next-step model forward ``horizon`` steps.

    ``last_window`` is on the model's normalized scale; each prediction is
    appended to the window before the next step. Output is denormalized
    with ``model.scaler``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    window = list(np.asarray(last_window, dtype=float))
    L = len(window)
    out = []
    for _ in range(horizon):
        nxt = float(np.asarray(model.predict(np.array(window[-L:])[None])).reshape(-1)[0])
        out.append(nxt)
        window.append(nxt)
    out = np.array(out)
    return model.scaler.inverse(out) if model.scaler is not None else out


def walk_forward(model: NeuralForecaster, history, test) -> np.ndarray:
    """One-step-ahead predictions for every ``test`` point from the true preceding values."""
    history = np.asarray(history, dtype=float)
    test = np.asarray(test, dtype=float)
    L = model.cfg.seq_len
    if history.size < L:
        raise ValueError(f"need at least {L} history points")
    full = model.scaler.transform(np.concatenate([history[-L:], test]))
    X = np.lib.stride_tricks.sliding_window_view(full, L)[: test.size]
    preds = []
    for start in range(0, X.shape[0], 256):
        preds.append(model.predict(X[start:start + 256]))
    return model.scaler.inverse(np.concatenate(preds))


def persistence_forecast(history, test) -> np.ndarray:
    """Last-value baseline: the prediction for step i is the observation at i-1."""
    history = np.asarray(history, dtype=float)
    test = np.asarray(test, dtype=float)
    return np.concatenate([history[-1:], test[:-1]])


def save_model(path, model: NeuralForecaster) -> None:
    nn.save_checkpoint(path, model.params, model.to_meta())


def load_model(path) -> NeuralForecaster:
    params, meta = nn.load_checkpoint(path)
    cfg = ForecastConfig(**meta["config"])
    scaler = None if meta["scaler"] is None else MinMaxScaler(*meta["scaler"])
    return MODEL_CLASSES[meta["kind"]](cfg, params, scaler)
