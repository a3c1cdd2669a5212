"""Subset ARIMA on the 15-minute real-time price.

The model on the (optionally first-differenced, mean-centred) series ``z`` is

    z_t = sum_i alpha_i z_{t-a_i} + e_t + sum_j theta_j e_{t-m_j}

with arbitrary lag sets ``a`` and ``m``. Coefficients are estimated by
conditional sum of squares: innovations before the first usable step are
zero, and the squared innovations are minimised with Levenberg-Marquardt
using the analytic Jacobian of the innovation recursion.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .core import STEPS_PER_DAY, MarketDataset
from .metrics import EvalResult

logger = logging.getLogger(__name__)

DEFAULT_LAGS = (1, 2, 96)


class ArimaFitError(RuntimeError):
    pass


def difference(series, d: int = 1) -> np.ndarray:
    """``d``-th order forward difference."""
    x = np.asarray(series, dtype=float)
    if d < 0:
        raise ValueError("d must be non-negative")
    if x.size <= d:
        raise ValueError(f"series of length {x.size} too short for differencing order {d}")
    return np.diff(x, n=d) if d else x.copy()


def undifference(diffed, initial) -> np.ndarray:
    """Invert first differencing given the first original value."""
    return np.concatenate([[initial], initial + np.cumsum(diffed)])


def _lags(lags) -> tuple[int, ...]:
    out = tuple(sorted({int(k) for k in lags}))
    if any(k <= 0 for k in out):
        raise ValueError("lags must be positive")
    return out


def _ma_poly(ma_lags, theta) -> np.ndarray:
    a = np.zeros((max(ma_lags) if ma_lags else 0) + 1)
    a[0] = 1.0
    for k, th in zip(ma_lags, theta):
        a[k] = th
    return a


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """``x`` delayed by ``k`` steps with zeros shifted in."""
    out = np.zeros_like(x)
    if k < x.size:
        out[k:] = x[: x.size - k]
    return out


def innovations(z, ar_lags, ma_lags, alpha, theta) -> np.ndarray:
    """Innovation sequence of a centred series, zero before the first AR lag."""
    z = np.asarray(z, dtype=float)
    t0 = max(ar_lags) if ar_lags else 0
    u = z.copy()
    for k, a in zip(ar_lags, alpha):
        u -= a * _shift(z, k)
    u[:t0] = 0.0
    return lfilter([1.0], _ma_poly(ma_lags, theta), u)


def css_objective(params, z, ar_lags, ma_lags) -> float:
    p = len(ar_lags)
    e = innovations(z, ar_lags, ma_lags, params[:p], params[p:])
    return float(e @ e)


def _residuals_and_jacobian(params, z, ar_lags, ma_lags):
    p = len(ar_lags)
    t0 = max(ar_lags) if ar_lags else 0
    alpha, theta = params[:p], params[p:]
    e = innovations(z, ar_lags, ma_lags, alpha, theta)
    a = _ma_poly(ma_lags, theta)
    J = np.empty((z.size, len(params)))
    for c, k in enumerate(ar_lags):
        col = -_shift(z, k)
        col[:t0] = 0.0
        J[:, c] = lfilter([1.0], a, col)
    for c, k in enumerate(ma_lags):
        J[:, p + c] = lfilter([1.0], a, -_shift(e, k))
    return e, J


def css_gradient(params, z, ar_lags, ma_lags) -> np.ndarray:
    """Analytic gradient of :func:`css_objective`."""
    e, J = _residuals_and_jacobian(np.asarray(params, float), np.asarray(z, float), ar_lags, ma_lags)
    return 2.0 * J.T @ e


def _levenberg_marquardt(z, ar_lags, ma_lags, max_iter, tol):
    n_par = len(ar_lags) + len(ma_lags)
    params = np.zeros(n_par)
    e, J = _residuals_and_jacobian(params, z, ar_lags, ma_lags)
    sse = float(e @ e)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if sse == 0.0:
            converged = True
            break
        g = J.T @ e
        H = J.T @ J
        # damping on the diagonal doubles as a ridge for singular problems
        damp = lam * (np.diag(H) + 1e-12 * (np.trace(H) / max(n_par, 1) + 1.0))
        improved = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(H + np.diag(damp), -g)
            except np.linalg.LinAlgError as exc:
                raise ArimaFitError(f"singular normal equations: {exc}") from None
            trial = params + step
            with np.errstate(over="ignore", invalid="ignore"):
                e_new = innovations(z, ar_lags, ma_lags, trial[: len(ar_lags)], trial[len(ar_lags):])
                sse_new = float(e_new @ e_new)
            if math.isfinite(sse_new) and sse_new <= sse:
                improved = True
                break
            lam *= 10.0
            damp = lam * (np.diag(H) + 1e-12 * (np.trace(H) / max(n_par, 1) + 1.0))
        if not improved:
            converged = True  # no descent direction left at machine precision
            break
        rel = (sse - sse_new) / max(sse, np.finfo(float).tiny)
        params = trial
        sse = sse_new
        lam = max(lam / 10.0, 1e-12)
        e, J = _residuals_and_jacobian(params, z, ar_lags, ma_lags)
        if rel < tol:
            converged = True
            break
    if not np.all(np.isfinite(params)):
        raise ArimaFitError("non-finite coefficients")
    return params, sse, it, converged


def _min_root_modulus(lags, coefs, sign) -> float:
    if not lags:
        return math.inf
    poly = np.zeros(max(lags) + 1)
    poly[0] = 1.0
    for k, c in zip(lags, coefs):
        poly[k] = sign * c
    if not np.any(poly[1:]):
        return math.inf
    roots = np.roots(poly[::-1])
    return float(np.abs(roots).min()) if roots.size else math.inf


class SubsetARIMA(BaseEstimator, RegressorMixin):
    """ARIMA with sparse AR/MA lag sets and differencing order 0 or 1.

    Parameters
    ----------
    ar_lags, ma_lags : sequence of int
        Lags in 15-minute steps. Defaults use the half hour and the same
        time on the previous day.
    d : {0, 1}
    max_iter : int
    tol : float
        Relative objective change below which fitting stops.
    """

    def __init__(self, ar_lags=DEFAULT_LAGS, ma_lags=DEFAULT_LAGS, d=1, max_iter=200, tol=1e-8):
        self.ar_lags = ar_lags
        self.ma_lags = ma_lags
        self.d = d
        self.max_iter = max_iter
        self.tol = tol

    @property
    def max_lag(self) -> int:
        return max(_lags(self.ar_lags) + _lags(self.ma_lags) + (0,))

    def _check_spec(self):
        if self.d not in (0, 1):
            raise ValueError("d must be 0 or 1")
        return _lags(self.ar_lags), _lags(self.ma_lags)

    def fit(self, X, y=None):
        """Fit on a contiguous, fully valid price series ``X``."""
        ar, ma = self._check_spec()
        x = column_or_1d(np.asarray(X, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ArimaFitError("series contains non-finite values")
        if x.size < 3 * max(self.max_lag, 1) + self.d:
            raise ArimaFitError(f"series of length {x.size} too short for max lag {self.max_lag}")
        z = difference(x, self.d)
        self.mean_ = float(z.mean())
        zc = z - self.mean_
        params, sse, iters, converged = _levenberg_marquardt(zc, ar, ma, self.max_iter, self.tol)
        self.alpha_ = params[: len(ar)]
        self.theta_ = params[len(ar):]
        t0 = max(ar) if ar else 0
        n_eff = zc.size - t0
        self.sigma2_ = sse / n_eff
        self.last_ = float(x[-1])
        self.fit_report_ = {
            "iterations": iters,
            "objective": sse,
            "n_effective": n_eff,
            "converged": converged,
            "diverged": not converged,
            "presample": "zero innovations and observations before the first AR lag",
            "min_ar_root": _min_root_modulus(ar, self.alpha_, -1.0),
            "min_ma_root": _min_root_modulus(ma, self.theta_, 1.0),
        }
        if self.fit_report_["min_ar_root"] <= 1.0 or self.fit_report_["min_ma_root"] <= 1.0:
            warnings.warn("fitted subset ARIMA is non-stationary or non-invertible")
        if not converged:
            logger.warning("CSS did not converge in %d iterations", self.max_iter)
        return self

    def _filter(self, x: np.ndarray) -> np.ndarray:
        """One-step predictions for positions ``0 .. len(x)``.

        Entry ``t`` uses ``x[:t]`` only; positions without enough history are
        NaN. The final entry is the forecast of the next, unseen value.
        """
        ar, ma = _lags(self.ar_lags), _lags(self.ma_lags)
        t0 = max(ar) if ar else 0
        z = difference(x, self.d) - self.mean_ if x.size > self.d else np.empty(0)
        e = innovations(z, ar, ma, self.alpha_, self.theta_)
        # built from lagged values only, so no entry depends on z[t] numerically
        zp, ep = np.append(z, 0.0), np.append(e, 0.0)
        zhat = np.zeros(zp.size)
        for a, k in zip(self.alpha_, ar):
            zhat += a * _shift(zp, k)
        for th, k in zip(self.theta_, ma):
            zhat += th * _shift(ep, k)
        zhat[:t0] = np.nan
        out = np.full(x.size + 1, np.nan)
        if self.d:
            out[1:] = x + self.mean_ + zhat
        else:
            out[:] = self.mean_ + zhat
        return out

    def predict(self, X):
        """One-step-ahead in-sample predictions for every position of ``X``."""
        check_is_fitted(self, "alpha_")
        x = column_or_1d(np.asarray(X, dtype=float))
        return self._filter(x)[: x.size]

    def forecast_one(self, history) -> float:
        """Forecast of the value following ``history``."""
        check_is_fitted(self, "alpha_")
        x = column_or_1d(np.asarray(history, dtype=float))
        if x.size < self.max_lag + self.d:
            raise ValueError(f"history of length {x.size} shorter than max lag + d")
        if not np.all(np.isfinite(x)):
            raise ValueError("history contains invalid values")
        return float(self._filter(x)[-1])

    def simulate(self, n: int, sigma=None, rng=None, burn: int = 500) -> np.ndarray:
        """Draw a series of length ``n`` from the fitted model."""
        check_is_fitted(self, "alpha_")
        rng = np.random.default_rng(rng)
        ar, ma = _lags(self.ar_lags), _lags(self.ma_lags)
        sd = math.sqrt(self.sigma2_) if sigma is None else sigma
        eps = rng.standard_normal(n + burn) * sd
        a = np.zeros((max(ar) if ar else 0) + 1)
        a[0] = 1.0
        for k, c in zip(ar, self.alpha_):
            a[k] = -c
        z = lfilter(_ma_poly(ma, self.theta_), a, eps)[burn:] + self.mean_
        return np.cumsum(z) if self.d else z

    def to_dict(self) -> dict:
        check_is_fitted(self, "alpha_")
        return {
            "spec": {"ar_lags": list(_lags(self.ar_lags)), "ma_lags": list(_lags(self.ma_lags)),
                     "d": self.d},
            "alpha": self.alpha_.tolist(),
            "theta": self.theta_.tolist(),
            "sigma2": self.sigma2_,
            "mean": self.mean_,
            "fit_report": self.fit_report_,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetARIMA":
        spec = d["spec"]
        m = cls(tuple(spec["ar_lags"]), tuple(spec["ma_lags"]), spec["d"])
        m.alpha_ = np.asarray(d["alpha"], float)
        m.theta_ = np.asarray(d["theta"], float)
        m.sigma2_ = float(d["sigma2"])
        m.mean_ = float(d.get("mean", 0.0))
        m.fit_report_ = d.get("fit_report", {})
        return m


def fit(series, ar_lags=DEFAULT_LAGS, ma_lags=DEFAULT_LAGS, d=1, **kwargs) -> SubsetARIMA:
    return SubsetARIMA(ar_lags, ma_lags, d, **kwargs).fit(series)


def forecast_one(model: SubsetARIMA, history) -> float:
    return model.forecast_one(history)


# --- rolling-origin evaluation --------------------------------------------


@dataclass(frozen=True)
class RollingConfig:
    """Window lengths in days; the origin advances by ``test_window``."""

    train_window: float = 20
    test_window: float = 5

    def __post_init__(self):
        if self.test_window <= 0 or self.train_window <= 0:
            raise ValueError("windows must be positive")

    @property
    def train_steps(self) -> int:
        return int(round(self.train_window * STEPS_PER_DAY))

    @property
    def test_steps(self) -> int:
        return int(round(self.test_window * STEPS_PER_DAY))


def rolling_origins(n_steps: int, train_steps: int, test_steps: int) -> list[tuple[int, int, int]]:
    """``(train_start, test_start, test_end)`` per window, half-open.

    The trailing window is kept when it is shorter than ``test_steps`` but
    non-empty, so the last test window ends with the data.
    """
    if n_steps < train_steps + test_steps:
        raise ValueError("span shorter than one training plus one test window")
    out = []
    start = 0
    while start + train_steps < n_steps:
        test_start = start + train_steps
        out.append((start, test_start, min(test_start + test_steps, n_steps)))
        start += test_steps
    return out


@dataclass
class WindowTrace:
    train_start: int
    test_start: int
    test_end: int
    n: int = 0
    mae: float = math.nan
    status: str = "ok"
    coefficients: dict = field(default_factory=dict)


@dataclass
class RollingResult:
    result: EvalResult | None
    windows: list[WindowTrace]
    steps: np.ndarray
    predictions: np.ndarray
    persistence: np.ndarray

    def persistence_result(self) -> EvalResult:
        real = self.result.real
        return EvalResult.from_pairs(real, self.persistence)


def _valid_runs(valid: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` runs of consecutive true entries."""
    padded = np.concatenate([[False], valid, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def _evaluate_window(price, valid, window, params):
    train_start, test_start, test_end = window
    trace = WindowTrace(train_start, test_start, test_end)
    tv = valid[train_start:test_start]
    runs = _valid_runs(tv)
    model = SubsetARIMA(**params)
    need = 3 * max(model.max_lag, 1) + model.d
    best = max(runs, key=lambda r: r[1] - r[0], default=(0, 0))
    if best[1] - best[0] < need:
        trace.status = "skipped: no valid training run long enough"
        logger.info("window at %d skipped: %s", train_start, trace.status)
        return trace, [], [], []
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model.fit(price[train_start + best[0]: train_start + best[1]])
    except ArimaFitError as exc:
        trace.status = f"failed: {exc}"
        return trace, [], [], []
    trace.coefficients = {"alpha": model.alpha_.tolist(), "theta": model.theta_.tolist(),
                          "sigma2": model.sigma2_}
    steps, preds, persist = [], [], []
    seg_valid = valid[train_start:test_end]
    for a, b in _valid_runs(seg_valid):
        if train_start + b <= test_start:
            continue
        lo = train_start + a
        x = price[lo: train_start + b]
        p = model.predict(x)
        for t in range(max(test_start, lo + 1), train_start + b):
            if np.isfinite(p[t - lo]):
                steps.append(t)
                preds.append(p[t - lo])
                persist.append(price[t - 1])
    trace.n = len(steps)
    if steps:
        trace.mae = float(np.mean(np.abs(price[steps] - np.asarray(preds))))
    else:
        trace.status = "skipped: no valid test steps"
    return trace, steps, preds, persist


def rolling_evaluate(ds, spec: SubsetARIMA | dict | None = None,
                     cfg: RollingConfig | None = None, n_jobs: int = 1) -> RollingResult:
    """Rolling-origin one-step evaluation of a subset ARIMA on ``rt_price``.

    Each window refits on its training span and predicts every valid test
    step from observations strictly before it. ``ds`` may be a
    :class:`MarketDataset` or a ``(price, valid)`` pair.
    """
    cfg = cfg or RollingConfig()
    if isinstance(spec, SubsetARIMA):
        params = spec.get_params()
    else:
        params = SubsetARIMA(**(spec or {})).get_params()
    if isinstance(ds, MarketDataset):
        price, valid = ds.rt_price.values, ds.rt_price.valid
        stamps = ds.timestamps
    else:
        price, valid = (np.asarray(a) for a in ds)
        stamps = None
    windows = rolling_origins(price.size, cfg.train_steps, cfg.test_steps)
    if n_jobs == 1:
        results = [_evaluate_window(price, valid, w, params) for w in windows]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda w: _evaluate_window(price, valid, w, params), windows))
    traces = [r[0] for r in results]
    steps = np.array([s for r in results for s in r[1]], dtype=int)
    preds = np.array([p for r in results for p in r[2]], dtype=float)
    persist = np.array([p for r in results for p in r[3]], dtype=float)
    result = None
    if steps.size:
        result = EvalResult.from_pairs(price[steps], preds,
                                       timestamps=None if stamps is None else stamps[steps])
    return RollingResult(result, traces, steps, preds, persist)
