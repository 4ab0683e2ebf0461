"""Offline-to-online adaptation of a trained forecaster.

Source series are screened against a short target recording with dynamic
time warping. The accepted source windows and the labelled target
windows are mapped through a small convolutional feature extractor, and
the forecaster is fine-tuned on the target task loss plus RBF-kernel
discrepancies between the two feature distributions: MMD for the
marginals and a label-binned conditional MMD for ``P(Y | X)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import nn
from .forecasters import GRUForecaster, make_windows

log = logging.getLogger(__name__)

EMPTY_BIN_PENALTY = 2.0


# --------------------------------------------------------------------------
# DTW

def dtw_distance(a, b) -> float:
    """DTW with squared-Euclidean local cost over the full grid; returns sqrt of the path cost."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("dtw needs non-empty series")
    a2 = a.reshape(a.shape[0], -1)
    b2 = b.reshape(b.shape[0], -1)
    cost = cdist(a2, b2, "sqeuclidean")
    n, m = cost.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        prev, cur = D[i - 1], D[i]
        row = cost[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = row[j - 1] + best
    return float(np.sqrt(D[n, m]))


@dataclass(frozen=True)
class SourceMatch:
    key: object
    distance: float


def select_sources(candidates, target, threshold: float) -> list:
    """Candidates whose DTW distance to ``target`` is strictly below ``threshold``.

    ``candidates`` is a mapping ``key -> series`` or a sequence (keys are
    indices). Results are sorted by ascending distance.
    """
    target = np.asarray(target, dtype=float)
    if target.size == 0:
        raise ValueError("target series is empty")
    items = candidates.items() if hasattr(candidates, "items") else enumerate(candidates)
    accepted = []
    for key, series in items:
        d = dtw_distance(series, target)
        if d < threshold:
            accepted.append(SourceMatch(key, d))
        else:
            log.debug("source %r rejected (dtw %.4g >= %.4g)", key, d, threshold)
    accepted.sort(key=lambda m: m.distance)
    return accepted


# --------------------------------------------------------------------------
# features

@dataclass
class DomainSample:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.Y.size:
            raise ValueError(f"{self.X.shape[0]} feature rows but {self.Y.size} labels")


class FeatureExtractor:
    """conv(filters, 3) -> ReLU -> maxpool(2), flattened."""

    def __init__(self, params: dict):
        self.params = params

    @classmethod
    def init(cls, filters: int = 64, width: int = 3, seed: int = 0) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        return cls({"ext.W": nn.uniform_init(rng, (filters, 1, width), width),
                    "ext.b": nn.uniform_init(rng, filters, width)})

    @property
    def width(self) -> int:
        return self.params["ext.W"].shape[2]

    def feature_dim(self, seq_len: int) -> int:
        return self.params["ext.W"].shape[0] * ((seq_len - self.width + 1) // 2)

    def forward(self, windows):
        windows = np.atleast_2d(np.asarray(windows, dtype=float))
        if windows.shape[1] < self.width + 1:
            raise ValueError(f"windows of length {windows.shape[1]} shorter than the receptive field")
        a, c = nn.conv1d_forward(windows[:, None, :], self.params["ext.W"], self.params["ext.b"])
        m, pc = nn.maxpool1d_forward(nn.relu(a))
        return m.reshape(m.shape[0], -1), (c, a, pc, m.shape)

    def __call__(self, windows) -> np.ndarray:
        return self.forward(windows)[0]

    def backward(self, dfeat, cache) -> dict:
        c, a, pc, shape = cache
        d = nn.relu_backward(nn.maxpool1d_backward(dfeat.reshape(shape), pc), a)
        _, dW, db = nn.conv1d_backward(d, c)
        return {"ext.W": dW, "ext.b": db}


def extract_features(windows, labels, extractor: FeatureExtractor) -> DomainSample:
    return DomainSample(extractor(windows), labels)


# --------------------------------------------------------------------------
# kernel discrepancies

def median_bandwidth(A, B) -> float:
    """Median pairwise Euclidean distance over the pooled sample (1.0 if degenerate)."""
    pooled = np.vstack([np.atleast_2d(A), np.atleast_2d(B)])
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def rbf_kernel(A, B, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bandwidth ** 2))


def _check_sets(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] == 0 or B.shape[0] == 0 or A.size == 0 or B.size == 0:
        raise ValueError("mmd needs two non-empty samples")
    if A.shape[1] != B.shape[1]:
        raise ValueError("samples have different feature dimensions")
    return A, B


def mmd2(A, B, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD under an RBF kernel, diagonal terms included."""
    return mmd2_grad(A, B, bandwidth, need_grad=False)[0]


def mmd2_grad(A, B, bandwidth: float | None = None, need_grad: bool = True):
    """Squared MMD and its gradients with respect to the rows of ``A`` and ``B``.

    The bandwidth is treated as a constant even when it comes from the
    median heuristic.
    """
    A, B = _check_sets(A, B)
    gamma = median_bandwidth(A, B) if bandwidth is None else float(bandwidth)
    n, m = A.shape[0], B.shape[0]
    Kaa = rbf_kernel(A, A, gamma)
    Kbb = rbf_kernel(B, B, gamma)
    Kab = rbf_kernel(A, B, gamma)
    value = Kaa.sum() / n ** 2 + Kbb.sum() / m ** 2 - 2.0 * Kab.sum() / (n * m)
    if not need_grad:
        return float(value), None, None
    g2 = gamma ** 2
    dA = (-2.0 / (n ** 2 * g2)) * (Kaa.sum(1)[:, None] * A - Kaa @ A) \
        + (2.0 / (n * m * g2)) * (Kab.sum(1)[:, None] * A - Kab @ B)
    dB = (-2.0 / (m ** 2 * g2)) * (Kbb.sum(1)[:, None] * B - Kbb @ B) \
        + (2.0 / (n * m * g2)) * (Kab.sum(0)[:, None] * B - Kab.T @ A)
    return float(value), dA, dB


def label_bins(y_src, y_tgt, bins: int):
    """Assign both label sets to ``bins`` quantile bins of the pooled labels."""
    pooled = np.concatenate([y_src, y_tgt])
    if pooled.size < bins:
        raise ValueError(f"{pooled.size} labels cannot fill {bins} bins")
    edges = np.quantile(pooled, np.linspace(0.0, 1.0, bins + 1))
    inner = edges[1:-1]
    return np.searchsorted(inner, y_src, side="right"), np.searchsorted(inner, y_tgt, side="right")


def cmmd(src: DomainSample, tgt: DomainSample, bandwidth: float | None = None, bins: int = 4) -> float:
    return cmmd_grad(src, tgt, bandwidth, bins, need_grad=False)[0]


def cmmd_grad(src: DomainSample, tgt: DomainSample, bandwidth: float | None = None,
              bins: int = 4, need_grad: bool = True):
    """Label-binned conditional MMD.

    Labels are pooled and cut at quantiles into ``bins`` bins; each bin
    contributes its pooled mass times the squared MMD between the source
    and target features falling in it. A bin populated on only one side
    contributes its mass times ``EMPTY_BIN_PENALTY``.
    """
    if bins < 2:
        raise ValueError("need at least two label bins")
    Xs, Xt = _check_sets(src.X, tgt.X)
    gamma = median_bandwidth(Xs, Xt) if bandwidth is None else float(bandwidth)
    bs, bt = label_bins(src.Y, tgt.Y, bins)
    total = Xs.shape[0] + Xt.shape[0]
    dXs = np.zeros_like(Xs) if need_grad else None
    dXt = np.zeros_like(Xt) if need_grad else None
    value = 0.0
    for b in range(bins):
        ms, mt = bs == b, bt == b
        ns, nt = int(ms.sum()), int(mt.sum())
        if ns + nt == 0:
            continue
        w = (ns + nt) / total
        if ns == 0 or nt == 0:
            value += w * EMPTY_BIN_PENALTY
            continue
        v, ga, gb = mmd2_grad(Xs[ms], Xt[mt], gamma, need_grad)
        value += w * v
        if need_grad:
            dXs[ms] += w * ga
            dXt[mt] += w * gb
    return float(value), dXs, dXt


# --------------------------------------------------------------------------
# joint adaptation

@dataclass(frozen=True)
class AdaptConfig:
    dtw_threshold: float = float("inf")
    lambda1: float = 1.0
    lambda2: float = 1.0
    kernel_bandwidth: float | None = None      # None -> median heuristic
    adapt_epochs: int = 5
    cmmd_bins: int = 4
    lr: float = 0.001
    batch_size: int = 16
    prelim_fraction: float = 0.10
    eval_samples: int = 512                    # cap per domain for the per-epoch discrepancy trace
    seed: int = 0

    def __post_init__(self):
        if self.dtw_threshold < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("threshold and loss weights must be nonnegative")
        if self.cmmd_bins < 2:
            raise ValueError("cmmd_bins must be >= 2")
        if self.eval_samples < 2:
            raise ValueError("eval_samples must be >= 2")
        if self.kernel_bandwidth is not None and not self.kernel_bandwidth > 0:
            raise ValueError("kernel bandwidth must be positive")


class AdaptedForecaster:
    """Source GRU with frozen recurrent layers plus a feature-driven correction.

    ``predict(X) = head(gru_state(X)) + correction(extractor(X))``. The
    correction head starts at zero, so before adaptation the predictions
    equal the source model's. Trainable parameters are the GRU output head,
    the extractor and the correction head.
    """

    kind = "adapted-gru"

    def __init__(self, base: GRUForecaster, extractor: FeatureExtractor, params: dict | None = None):
        self.base = base
        self.extractor = extractor
        self.cfg = base.cfg
        self.scaler = base.scaler
        if params is None:
            dim = extractor.feature_dim(base.cfg.seq_len)
            params = {"head.W": base.params["out.W"].copy(), "head.b": base.params["out.b"].copy(),
                      "res.W": np.zeros((1, dim)), "res.b": np.zeros(1)}
            params.update({k: v.copy() for k, v in extractor.params.items()})
        self.params = params
        self.extractor.params = {k: self.params[k] for k in extractor.params}

    def forward(self, X, hidden=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        H = self.base.features(X) if hidden is None else hidden
        F, fcache = self.extractor.forward(X)
        p = self.params
        pred = (H @ p["head.W"].T + p["head.b"] + F @ p["res.W"].T + p["res.b"])[:, 0]
        return pred, (H, F, fcache)

    def predict(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def features(self, X) -> np.ndarray:
        return self.extractor(np.atleast_2d(X))

    def backward(self, dpred, dF_extra, cache) -> dict:
        H, F, fcache = cache
        d = dpred[:, None]
        grads = {"head.W": d.T @ H, "head.b": d.sum(0), "res.W": d.T @ F, "res.b": d.sum(0)}
        dF = d @ self.params["res.W"]
        if dF_extra is not None:
            dF = dF + dF_extra
        grads.update(self.extractor.backward(dF, fcache))
        return grads

    def to_meta(self) -> dict:
        meta = self.base.to_meta()
        meta["kind"] = self.kind
        return meta


@dataclass
class AdaptTrace:
    rows: list = field(default_factory=list)

    def add(self, epoch, task, mmd_, cmmd_, cfg: AdaptConfig):
        self.rows.append({"epoch": epoch, "task_loss": task, "mmd_loss": mmd_, "cmmd_loss": cmmd_,
                          "joint_loss": task + cfg.lambda1 * mmd_ + cfg.lambda2 * cmmd_})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def _spread(n: int, cap: int) -> np.ndarray:
    """At most ``cap`` evenly spaced indices into ``range(n)``."""
    if n <= cap:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).round().astype(int))


def _evaluate(model: AdaptedForecaster, src, tgt, Ht, cfg: AdaptConfig):
    Xs, ys = src
    Xt, yt = tgt
    pred = model.forward(Xt, Ht)[0]
    task = nn.mse_loss(pred, yt)[0]
    i_s, i_t = _spread(Xs.shape[0], cfg.eval_samples), _spread(Xt.shape[0], cfg.eval_samples)
    Xs, ys, Xt, yt = Xs[i_s], ys[i_s], Xt[i_t], yt[i_t]
    Fs, Ft = model.features(Xs), model.features(Xt)
    m = mmd2(Fs, Ft, cfg.kernel_bandwidth)
    c = cmmd(DomainSample(Fs, ys), DomainSample(Ft, yt), cfg.kernel_bandwidth, cfg.cmmd_bins)
    return task, m, c


def _adapt(model: GRUForecaster, extractor: FeatureExtractor, src, tgt, cfg: AdaptConfig,
           discrepancy: bool):
    Xs, ys = (np.asarray(a, dtype=float) for a in src)
    Xt, yt = (np.asarray(a, dtype=float) for a in tgt)
    adapted = AdaptedForecaster(model, FeatureExtractor(dict(extractor.params)))
    Ht = model.features(Xt)
    opt = nn.Adam(lr=cfg.lr)
    trace = AdaptTrace()
    trace.add(0, *_evaluate(adapted, (Xs, ys), (Xt, yt), Ht, cfg), cfg)
    B = cfg.batch_size
    n_src = Xs.shape[0]
    step = 0
    for epoch in range(1, cfg.adapt_epochs + 1):
        for start in range(0, Xt.shape[0], B):
            sl = slice(start, start + B)
            xb, yb = Xt[sl], yt[sl]
            pred, cache = adapted.forward(xb, Ht[sl])
            loss, dpred = nn.mse_loss(pred, yb)
            if not np.isfinite(loss):
                raise nn.DivergenceError(f"diverged: task loss {loss} in epoch {epoch}")
            if discrepancy:
                idx = (np.arange(xb.shape[0]) + step * B) % n_src
                Fs_b, s_cache = adapted.extractor.forward(Xs[idx])
                Ft_b = cache[1]
                _, gs_m, gt_m = mmd2_grad(Fs_b, Ft_b, cfg.kernel_bandwidth)
                _, gs_c, gt_c = cmmd_grad(DomainSample(Fs_b, ys[idx]), DomainSample(Ft_b, yb),
                                          cfg.kernel_bandwidth, cfg.cmmd_bins)
                grads = adapted.backward(dpred, cfg.lambda1 * gt_m + cfg.lambda2 * gt_c, cache)
                src_grads = adapted.extractor.backward(cfg.lambda1 * gs_m + cfg.lambda2 * gs_c, s_cache)
                for k, g in src_grads.items():
                    grads[k] = grads[k] + g
            else:
                grads = adapted.backward(dpred, None, cache)
            opt.step(adapted.params, grads)
            step += 1
        trace.add(epoch, *_evaluate(adapted, (Xs, ys), (Xt, yt), Ht, cfg), cfg)
        if not np.isfinite(trace.rows[-1]["joint_loss"]):
            raise nn.DivergenceError(f"diverged: joint loss non-finite after epoch {epoch}")
    return adapted, trace


def joint_adapt(model: GRUForecaster, extractor: FeatureExtractor, src, tgt,
                cfg: AdaptConfig = AdaptConfig()):
    """Fine-tune on ``L_task + lambda1 * MMD^2 + lambda2 * CMMD`` over target windows.

    ``src`` and ``tgt`` are ``(windows, next_values)`` pairs on the base
    model's normalized scale. Returns the adapted model and a per-epoch
    trace (epoch 0 is before any update).
    """
    return _adapt(model, extractor, src, tgt, cfg, discrepancy=True)


def fine_tune(model: GRUForecaster, extractor: FeatureExtractor, src, tgt,
              cfg: AdaptConfig = AdaptConfig()):
    """Task-loss-only fine-tuning of the same parameters, for comparison."""
    return _adapt(model, extractor, src, tgt, cfg, discrepancy=False)


def domain_windows(values, model: GRUForecaster):
    """Normalize with the model's scaler and cut ``(X, y)`` windows."""
    return make_windows(model.scaler.transform(values), model.cfg.seq_len)


def preliminary_split(values, fraction: float = 0.10):
    """Split a target stream into the preliminary collection and the remainder."""
    values = np.asarray(values, dtype=float)
    k = int(np.floor(fraction * values.size))
    return values[:k], values[k:]
