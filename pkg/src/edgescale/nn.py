"""Small reverse-mode neural network kernel in float64 numpy.

Only the layers the forecasters need are here: dense, GRU, 1-D
convolution, max pooling, inverted dropout and MSE. Every forward
function returns a cache that the matching backward function consumes.
Parameters live in flat ``dict[str, ndarray]`` containers so the
optimizer, gradient checker and checkpoint code can treat every model
the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(x)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# dense / loss

def dense_forward(x, W, b):
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense: input width {x.shape[-1]} does not match weight {W.shape}")
    return x @ W.T + b


def dense_backward(dy, x, W):
    dW = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ W
    return dx, dW, db


def mse_loss(pred, target):
    """Mean of squared residuals and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    resid = pred - target
    loss = float(np.mean(resid ** 2))
    return loss, 2.0 * resid / resid.size


# --------------------------------------------------------------------------
# GRU

@dataclass
class GruParams:
    """Weights of one GRU layer acting on ``[h_prev, x_t]``.

    ``W_R``, ``W_U`` and ``W_h`` have shape ``(hidden, hidden + input)``.
    Instances usually hold views into a model's parameter dict, so
    in-place optimizer updates are visible here.
    """

    W_R: np.ndarray
    W_U: np.ndarray
    W_h: np.ndarray
    b_R: np.ndarray
    b_U: np.ndarray
    b_h: np.ndarray

    NAMES = ("W_R", "W_U", "W_h", "b_R", "b_U", "b_h")

    def __post_init__(self):
        H = self.b_R.shape[0]
        for name in ("W_R", "W_U", "W_h"):
            W = getattr(self, name)
            if W.ndim != 2 or W.shape[0] != H or W.shape[1] <= H:
                raise ValueError(f"{name} has shape {W.shape}, inconsistent with hidden size {H}")
        for name in ("b_U", "b_h"):
            if getattr(self, name).shape != (H,):
                raise ValueError(f"{name} must have shape ({H},)")

    @property
    def hidden_size(self) -> int:
        return self.b_R.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_R.shape[1] - self.hidden_size

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        fan_in = input_size + hidden_size
        shape = (hidden_size, fan_in)
        return cls(
            W_R=uniform_init(rng, shape, fan_in),
            W_U=uniform_init(rng, shape, fan_in),
            W_h=uniform_init(rng, shape, fan_in),
            b_R=uniform_init(rng, hidden_size, fan_in),
            b_U=uniform_init(rng, hidden_size, fan_in),
            b_h=uniform_init(rng, hidden_size, fan_in),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruParams":
        shape = (hidden_size, input_size + hidden_size)
        return cls(*(np.zeros(shape) for _ in range(3)), *(np.zeros(hidden_size) for _ in range(3)))

    def as_dict(self, prefix: str = "") -> dict:
        return {prefix + n: getattr(self, n) for n in self.NAMES}

    @classmethod
    def from_dict(cls, params: dict, prefix: str = "") -> "GruParams":
        return cls(**{n: params[prefix + n] for n in cls.NAMES})


def _gru_cell(x, h_prev, p: GruParams):
    H = p.hidden_size
    if x.shape[-1] != p.input_size or h_prev.shape[-1] != H:
        raise ValueError(
            f"gru cell: got input {x.shape[-1]} / hidden {h_prev.shape[-1]}, "
            f"expected {p.input_size} / {H}")
    z = np.concatenate([h_prev, x], axis=-1)
    r = sigmoid(z @ p.W_R.T + p.b_R)
    u = sigmoid(z @ p.W_U.T + p.b_U)
    zh = np.concatenate([r * h_prev, x], axis=-1)
    hc = np.tanh(zh @ p.W_h.T + p.b_h)
    h = (1.0 - u) * h_prev + u * hc
    return h, (z, zh, r, u, hc, h_prev)


def gru_cell_forward(x_t, h_prev, params: GruParams):
    """One GRU step. Accepts single vectors or ``(batch, features)`` arrays."""
    x_t = np.asarray(x_t, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    h, _ = _gru_cell(np.atleast_2d(x_t), np.atleast_2d(h_prev), params)
    return h.reshape(h_prev.shape) if h_prev.ndim == 1 else h


def gru_cell_backward(dh, cache, p: GruParams, grads: dict):
    """Backprop one step; accumulates into ``grads`` keyed by GruParams names."""
    z, zh, r, u, hc, h_prev = cache
    H = p.hidden_size
    dhc = dh * u
    du = dh * (hc - h_prev)
    dh_prev = dh * (1.0 - u)

    da_h = dhc * (1.0 - hc ** 2)
    grads["W_h"] += da_h.T @ zh
    grads["b_h"] += da_h.sum(axis=0)
    dzh = da_h @ p.W_h
    drh = dzh[:, :H]
    dx = dzh[:, H:].copy()
    dr = drh * h_prev
    dh_prev += drh * r

    da_u = du * u * (1.0 - u)
    da_r = dr * r * (1.0 - r)
    grads["W_U"] += da_u.T @ z
    grads["b_U"] += da_u.sum(axis=0)
    grads["W_R"] += da_r.T @ z
    grads["b_R"] += da_r.sum(axis=0)
    dz = da_u @ p.W_U + da_r @ p.W_R
    dh_prev += dz[:, :H]
    dx += dz[:, H:]
    return dx, dh_prev


def dropout_forward(x, p: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout; identity (mask ``None``) outside training or at p=0."""
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def gru_sequence_forward(xs, layers, dropout_p: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None):
    """Run stacked GRU layers over ``xs`` of shape ``(batch, time, features)``.

    Hidden states start at zero. Dropout is applied to each layer's output
    sequence before it feeds the next layer. Returns the top layer's final
    hidden state and a cache for :func:`gru_sequence_backward`.
    """
    if not layers:
        raise ValueError("need at least one GRU layer")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 2:
        xs = xs[None]
    B, T, _ = xs.shape
    if T == 0:
        raise ValueError("empty input sequence")
    caches = []
    seq = xs
    for li, p in enumerate(layers):
        if li > 0:
            seq, mask = dropout_forward(seq, dropout_p, rng, training)
        else:
            mask = None
        h = np.zeros((B, p.hidden_size))
        outs = np.empty((B, T, p.hidden_size))
        steps = []
        for t in range(T):
            h, c = _gru_cell(seq[:, t], h, p)
            outs[:, t] = h
            steps.append(c)
        caches.append((steps, mask))
        seq = outs
    return seq[:, -1], caches


def gru_forward_sequence(xs, layers, dropout_p: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None):
    """Final hidden state of the top layer (no cache)."""
    h, _ = gru_sequence_forward(xs, layers, dropout_p, training, rng)
    return h


def gru_sequence_backward(dh_last, caches, layers):
    """Gradients for every layer given the gradient at the top final state.

    Returns ``(dxs, [grad dict per layer])``.
    """
    grads_all = [None] * len(layers)
    B = dh_last.shape[0]
    T = len(caches[0][0])
    d_out = np.zeros((B, T, layers[-1].hidden_size))
    d_out[:, -1] = dh_last
    for li in range(len(layers) - 1, -1, -1):
        p = layers[li]
        steps, mask = caches[li]
        grads = {n: np.zeros_like(getattr(p, n)) for n in GruParams.NAMES}
        d_in = np.empty((B, T, p.input_size))
        dh = np.zeros((B, p.hidden_size))
        for t in range(T - 1, -1, -1):
            dx, dh = gru_cell_backward(d_out[:, t] + dh, steps[t], p, grads)
            d_in[:, t] = dx
        grads_all[li] = grads
        d_out = dropout_backward(d_in, mask)
    return d_out, grads_all


# --------------------------------------------------------------------------
# convolution / pooling

def conv1d_forward(x, W, b):
    """Valid, stride-1 cross-correlation.

    ``x`` is ``(batch, channels, length)`` (or ``(channels, length)``), ``W``
    is ``(filters, channels, width)``. Returns ``(out, cache)``.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    K, C, w = W.shape
    if x.shape[1] != C:
        raise ValueError(f"conv1d: {x.shape[1]} input channels, kernel expects {C}")
    if x.shape[2] < w:
        raise ValueError(f"conv1d: signal length {x.shape[2]} shorter than kernel width {w}")
    win = sliding_window_view(x, w, axis=2)  # (B, C, Lo, w)
    out = np.einsum("bclw,kcw->bkl", win, W, optimize=True) + b[None, :, None]
    return (out[0] if squeeze else out), (x, W)


def conv1d_backward(dy, cache):
    x, W = cache
    if dy.ndim == 2:
        dy = dy[None]
    w = W.shape[2]
    Lo = dy.shape[2]
    win = sliding_window_view(x, w, axis=2)
    dW = np.einsum("bkl,bclw->kcw", dy, win, optimize=True)
    db = dy.sum(axis=(0, 2))
    dx = np.zeros_like(x)
    for j in range(w):
        dx[:, :, j:j + Lo] += np.einsum("bkl,kc->bcl", dy, W[:, :, j], optimize=True)
    return dx, dW, db


def maxpool1d_forward(x, factor: int = 2):
    """Non-overlapping max pooling along the last axis; trailing remainder dropped."""
    x = np.asarray(x, dtype=float)
    L = x.shape[-1]
    if L < factor:
        raise ValueError(f"maxpool: length {L} shorter than pool factor {factor}")
    Lo = L // factor
    xr = x[..., :Lo * factor].reshape(*x.shape[:-1], Lo, factor)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, factor)


def maxpool1d(x, factor: int = 2):
    return maxpool1d_forward(x, factor)[0]


def maxpool1d_backward(dy, cache):
    shape, arg, factor = cache
    Lo = arg.shape[-1]
    dxr = np.zeros((*shape[:-1], Lo, factor))
    np.put_along_axis(dxr, arg[..., None], dy[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[..., :Lo * factor] = dxr.reshape(*shape[:-1], Lo * factor)
    return dx


# --------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam updating parameter arrays in place."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"diverged: non-finite gradient for {k}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        return params


def adam_step(params: dict, grads: dict, state: Adam) -> dict:
    return state.step(params, grads)


# --------------------------------------------------------------------------
# verification

def grad_check(loss_fn, params: dict, grads: dict, eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Maximum relative error between ``grads`` and central differences.

    ``loss_fn()`` must read the arrays in ``params`` (which are perturbed in
    place and restored). The relative error per coordinate is
    ``|a - n| / max(|a| + |n|, floor)``. With ``max_coords`` a random
    subset of that many coordinates is checked.
    """
    coords = [(k, i) for k in params for i in range(params[k].size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for k, i in coords:
        arr = params[k].reshape(-1)
        old = arr[i]
        arr[i] = old + eps
        fp = loss_fn()
        arr[i] = old - eps
        fm = loss_fn()
        arr[i] = old
        num = (fp - fm) / (2 * eps)
        ana = grads[k].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana) + abs(num), floor)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict, meta: dict) -> None:
    """Store parameter arrays (exact float64 bytes) plus JSON metadata in an ``.npz``."""
    arrays = {f"param:{k}": np.ascontiguousarray(v) for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        params = {k[len("param:"):]: data[k].copy() for k in data.files if k.startswith("param:")}
    return params, meta
