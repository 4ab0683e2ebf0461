"""ARIMA(p, d, q) baseline fitted by conditional sum of squares.

Order selection follows the auto-ARIMA recipe: the differencing order is
picked with an augmented Dickey-Fuller unit-root test, then every
``(p, q)`` in the grid is fitted with a short Nelder-Mead run
(warm-started from Hannan-Rissanen regression estimates) and the lowest
AIC wins.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from .series import TimeSeries

log = logging.getLogger(__name__)

_BAD = 1e300


@dataclass
class ArimaModel:
    order: tuple
    phi: np.ndarray
    theta: np.ndarray
    c: float
    sse: float
    aic: float
    history: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    start: int = 0

    @property
    def p(self) -> int:
        return self.order[0]

    @property
    def d(self) -> int:
        return self.order[1]

    @property
    def q(self) -> int:
        return self.order[2]


def css_residuals(w, c, phi, theta, start: int) -> np.ndarray:
    """Residuals ``e_t = w_t - c - sum phi_i w_{t-i} - sum theta_j e_{t-j}`` for ``t >= start``.

    Residuals before ``start`` are taken as zero.
    """
    w = np.asarray(w, dtype=float)
    x = w[start:] - c
    for i, ph in enumerate(phi, start=1):
        x = x - ph * w[start - i: w.size - i]
    if len(theta):
        return lfilter([1.0], np.r_[1.0, theta], x)
    return x


def _invertible(theta) -> bool:
    """Schur-Cohn step-down: all roots of ``z^q + theta_1 z^(q-1) + ...`` inside the unit circle."""
    a = [1.0, *map(float, theta)]
    for m in range(len(a) - 1, 0, -1):
        k = a[m]
        if not abs(k) < 1.0:
            return False
        a = [1.0] + [(a[i] - k * a[m - i]) / (1.0 - k * k) for i in range(1, m)]
    return True


def _lagmat(w, lags: int, start: int):
    return np.column_stack([w[start - i: w.size - i] for i in range(1, lags + 1)]) if lags else \
        np.empty((w.size - start, 0))


def _start_params(w, p: int, q: int, start: int):
    """Hannan-Rissanen: long-AR residuals as MA regressors, then OLS."""
    n = w.size
    e = np.zeros(n)
    if q > 0:
        m = min(max(p + q, 8), max(1, (n - 1) // 4))
        A = np.column_stack([np.ones(n - m), _lagmat(w, m, m)])
        coef = np.linalg.lstsq(A, w[m:], rcond=None)[0]
        e[m:] = w[m:] - A @ coef
    A = np.column_stack([np.ones(n - start), _lagmat(w, p, start), _lagmat(e, q, start)])
    coef = np.linalg.lstsq(A, w[start:], rcond=None)[0]
    c, phi, theta = coef[0], coef[1:1 + p], coef[1 + p:]
    if not _invertible(theta):
        theta = np.zeros(q)
    return np.r_[c, phi, theta]


def _css(w, params, p, q, start):
    c, phi, theta = params[0], params[1:1 + p], params[1 + p:]
    if not _invertible(theta):
        return _BAD
    e = css_residuals(w, c, phi, theta, start)
    sse = float(e @ e)
    return sse if np.isfinite(sse) else _BAD


def aic_css(sse: float, n: int, k: int) -> float:
    """Gaussian AIC on ``n`` conditional residuals with ``k`` coefficients."""
    return n * np.log(max(sse, 1e-300) / n) + 2 * k


def fit_order(values, order, max_iter: int = 30, start: int | None = None, x0=None) -> ArimaModel:
    """Fit one ARIMA order; ``start`` defaults to ``p`` (conditioning points)."""
    p, d, q = order
    values = np.asarray(values, dtype=float)
    w = np.diff(values, n=d) if d else values
    start = p if start is None else start
    if w.size - start < p + q + 2:
        raise ValueError(f"too few observations for ARIMA{order}")
    if x0 is None:
        x0 = _start_params(w, p, q, start)
    best = np.asarray(x0, dtype=float)
    best_sse = _css(w, best, p, q, start)
    if p + q > 0 and max_iter > 0:
        res = minimize(_css, best, args=(w, p, q, start), method="Nelder-Mead",
                       options={"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-10})
        if res.fun < best_sse:
            best, best_sse = res.x, float(res.fun)
    elif p + q == 0:
        best = np.array([w[start:].mean()])
        best_sse = _css(w, best, p, q, start)
    if best_sse >= _BAD:
        raise ValueError(f"ARIMA{order} fit failed")
    c, phi, theta = float(best[0]), best[1:1 + p].copy(), best[1 + p:].copy()
    resid = css_residuals(w, c, phi, theta, start)
    n_eff = resid.size
    return ArimaModel(order=(p, d, q), phi=phi, theta=theta, c=c, sse=best_sse,
                      aic=aic_css(best_sse, n_eff, p + q + 1), history=values.copy(),
                      residuals=resid, start=start)


def needs_difference(values, alpha: float = 0.05) -> bool:
    """True when an augmented Dickey-Fuller test cannot reject a unit root at ``alpha``."""
    from statsmodels.tsa.stattools import adfuller

    values = np.asarray(values, dtype=float)
    if np.ptp(values) == 0:
        return False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pvalue = adfuller(values, regression="c", autolag="AIC")[1]
    return pvalue > alpha


def arima_fit(train, max_p: int = 3, max_q: int = 3, d_set=(0, 1), max_iter: int = 30) -> ArimaModel:
    """Select and fit an ARIMA model on ``train`` (TimeSeries or array)."""
    values = train.values if isinstance(train, TimeSeries) else np.asarray(train, dtype=float)
    d_set = sorted(set(d_set))
    if not d_set or min(d_set) < 0 or max(d_set) > 1:
        raise ValueError("d_set must be a non-empty subset of {0, 1}")
    d = d_set[0]
    if len(d_set) > 1 and needs_difference(values):
        d = 1
    if values.size - d < 20:
        raise ValueError("need at least 20 observations after differencing")
    best = None
    for p in range(max_p + 1):
        for q in range(max_q + 1):
            try:
                m = fit_order(values, (p, d, q), max_iter, start=max_p)
            except (ValueError, np.linalg.LinAlgError) as exc:
                log.debug("ARIMA(%d,%d,%d) failed: %s", p, d, q, exc)
                continue
            if best is None or m.aic < best.aic:
                best = m
    if best is None:
        raise ValueError("all ARIMA fits failed")
    return best


def predict_next(model: ArimaModel, history) -> float:
    """One-step forecast after ``history`` using the model's coefficients."""
    history = np.asarray(history, dtype=float)
    w = np.diff(history, n=model.d) if model.d else history
    p, q = model.p, model.q
    start = max(p, 0)
    e = css_residuals(w, model.c, model.phi, model.theta, start) if w.size > start else np.zeros(0)
    nxt = model.c
    for i in range(1, p + 1):
        nxt += model.phi[i - 1] * w[-i]
    for j in range(1, q + 1):
        if j <= e.size:
            nxt += model.theta[j - 1] * e[-j]
    return float(nxt + (history[-1] if model.d else 0.0))


def arima_forecast(model: ArimaModel, steps: int) -> np.ndarray:
    """Recursive multi-step forecast from the end of the training history."""
    hist = list(model.history)
    out = []
    for _ in range(steps):
        nxt = predict_next(model, np.array(hist))
        out.append(nxt)
        hist.append(nxt)
    return np.array(out)


def arima_forecast_rolling(model: ArimaModel, test, window: int, max_iter: int = 30,
                           history_len: int | None = None) -> np.ndarray:
    """Walk-forward one-step predictions over ``test``.

    Every ``window`` steps the coefficients of the selected order are refit
    on the trailing history (all of it, or the last ``history_len`` points),
    warm-started from the current coefficients.
    """
    test = test.values if isinstance(test, TimeSeries) else np.asarray(test, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    history = list(model.history)
    current = model
    preds = np.empty(test.size)
    for i in range(test.size):
        if i > 0 and i % window == 0:
            hist = np.array(history if history_len is None else history[-history_len:])
            x0 = np.r_[current.c, current.phi, current.theta]
            current = fit_order(hist, current.order, max_iter, start=current.start, x0=x0)
        preds[i] = predict_next(current, np.array(history))
        history.append(test[i])
    return preds
