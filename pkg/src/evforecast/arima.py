"""Per-entity univariate ARIMA on standardized series.

Estimation minimizes the conditional sum of squares (CSS) of one-step
residuals. Orders come from a fixed 18-cell grid and the lowest AIC wins;
fits that fail to converge or land outside the stationary/invertible region
are discarded, and an entity with no usable fit falls back to persistence.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from itertools import product

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

from .timeseries import Resolution

WINDOW_CAPS = {Resolution.TEN_MIN: 2048, Resolution.HOURLY: 1536, Resolution.DAILY: 730}

MAX_ITER = 500
STEP_TOL = 1e-8


class EstimationFailure(RuntimeError):
    """A single (p, d, q) fit did not produce a usable model."""


class FallbackRequired(RuntimeError):
    """No grid order could be fitted; use persistence instead."""


@dataclass(frozen=True, order=True)
class ArimaOrder:
    p: int
    d: int
    q: int

    def __post_init__(self) -> None:
        if self.p not in (0, 1, 2) or self.d not in (0, 1) or self.q not in (0, 1, 2):
            raise ValueError(f"order {self.p, self.d, self.q} is outside the restricted grid")

    @property
    def has_intercept(self) -> bool:
        # differenced models are driftless, so (0,1,0) is exactly a random walk
        return self.d == 0

    @property
    def n_params(self) -> int:
        """AR and MA coefficients, the intercept when estimated, and the residual variance."""
        return self.p + self.q + int(self.has_intercept) + 1


GRID = tuple(ArimaOrder(p, d, q) for p, d, q in product((0, 1, 2), (0, 1), (0, 1, 2)))


@dataclass(frozen=True)
class ArimaModel:
    order: ArimaOrder
    intercept: float
    ar: tuple[float, ...]
    ma: tuple[float, ...]
    sigma2: float
    aic: float
    css: float
    n_eff: int
    presample_mean: float
    fitted_on: str = ""

    def to_record(self) -> dict:
        d = asdict(self)
        d["order"] = [self.order.p, self.order.d, self.order.q]
        return d


def cap_window(y: np.ndarray, resolution: Resolution) -> np.ndarray:
    """The most recent ``min(cap, len(y))`` points."""
    cap = WINDOW_CAPS[resolution]
    y = np.asarray(y, dtype=np.float64)
    return y[-cap:] if len(y) > cap else y


def difference(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if d not in (0, 1):
        raise ValueError("d must be 0 or 1")
    if len(x) <= d:
        raise ValueError(f"series of length {len(x)} is too short to difference {d} time(s)")
    return x if d == 0 else np.diff(x)


def _lagged(w: np.ndarray, lag: int, fill: float) -> np.ndarray:
    out = np.empty_like(w)
    out[:lag] = fill
    out[lag:] = w[:-lag]
    return out


def css_residuals(w, intercept: float, ar, ma, presample_mean: float) -> np.ndarray:
    """One-step residuals with pre-sample observations at ``presample_mean``
    and pre-sample residuals at zero."""
    w = np.asarray(w, dtype=np.float64)
    u = w - intercept
    for i, phi in enumerate(ar, start=1):
        u = u - phi * _lagged(w, i, presample_mean)
    if not len(ma):
        return u
    return lfilter([1.0], np.r_[1.0, ma], u)


def polynomial_roots_outside(coefs, sign: float) -> bool:
    """True when 1 + sign*(c1 z + c2 z^2 ...) has every root strictly outside |z| = 1."""
    coefs = np.asarray(coefs, dtype=np.float64)
    if not coefs.size or not np.any(coefs):
        return True
    poly = np.r_[sign * coefs[::-1], 1.0]
    roots = np.roots(poly)
    return bool(np.all(np.abs(roots) > 1.0))


def _check_roots(ar, ma) -> None:
    if not polynomial_roots_outside(ar, -1.0):
        raise EstimationFailure("AR polynomial is not stationary")
    if not polynomial_roots_outside(ma, 1.0):
        raise EstimationFailure("MA polynomial is not invertible")


def _fit_ar_closed_form(w, p, mu, intercept: bool):
    cols = ([np.ones_like(w)] if intercept else []) + [_lagged(w, i, mu) for i in range(1, p + 1)]
    if not cols:
        return np.zeros(1)
    beta, *_ = np.linalg.lstsq(np.column_stack(cols), w, rcond=None)
    return beta if intercept else np.r_[0.0, beta]


def _fit_arma_iterative(w, p, q, mu, start, intercept: bool):
    def unpack(x):
        if not intercept:
            return 0.0, x[:p], x[p:]
        return x[0], x[1 : 1 + p], x[1 + p :]

    lag_cols = [_lagged(w, i, mu) for i in range(1, p + 1)]

    def residuals(x):
        c, ar, ma = unpack(x)
        # steps out of the admissible region are rejected like non-finite ones
        if not (polynomial_roots_outside(ar, -1.0) and polynomial_roots_outside(ma, 1.0)):
            return np.full_like(w, 1e10)
        with np.errstate(all="ignore"):
            e = css_residuals(w, c, ar, ma, mu)
        if not np.all(np.isfinite(e)):
            return np.full_like(w, 1e10)
        return e

    def jacobian(x):
        c, ar, ma = unpack(x)
        den = np.r_[1.0, ma]
        with np.errstate(all="ignore"):
            e = css_residuals(w, c, ar, ma, mu)
            cols = [lfilter([1.0], den, -np.ones_like(w))] if intercept else []
            cols += [lfilter([1.0], den, -col) for col in lag_cols]
            cols += [lfilter([1.0], den, -_lagged(e, j, 0.0)) for j in range(1, q + 1)]
        J = np.column_stack(cols)
        return np.where(np.isfinite(J), J, 0.0)

    if start is not None:
        x0 = np.asarray(start, dtype=np.float64)
        x0 = x0 if intercept else x0[1:]
    else:
        x0 = np.r_[mu, np.zeros(p + q)] if intercept else np.zeros(p + q)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = least_squares(
            residuals, x0, jac=jacobian, method="lm", xtol=STEP_TOL, ftol=1e-12, gtol=1e-12,
            max_nfev=MAX_ITER,
        )
    if sol.status <= 0 or not np.all(np.isfinite(sol.x)):
        raise EstimationFailure(f"optimizer did not converge: {sol.message}")
    return sol.x if intercept else np.r_[0.0, sol.x]


def css_fit(w, order: ArimaOrder, start=None, fitted_on: str = "") -> ArimaModel:
    """Fit ``order`` to an already differenced, standardized series ``w``.

    ``start`` optionally warm-starts the optimizer at ``[c, phi..., theta...]``;
    ``c`` is ignored for d = 1, which has no intercept.
    Pure AR orders are linear in their parameters and solved exactly.
    """
    w = np.asarray(w, dtype=np.float64)
    p, q = order.p, order.q
    n = len(w)
    if n < 10 * (p + q + 1):
        raise EstimationFailure(f"{n} points are too few for order {order}")
    if not np.all(np.isfinite(w)):
        raise EstimationFailure("series contains non-finite values")
    mu = float(w.mean())
    if q == 0:
        x = _fit_ar_closed_form(w, p, mu, order.has_intercept)
    else:
        x = _fit_arma_iterative(w, p, q, mu, start, order.has_intercept)
    c, ar, ma = float(x[0]), tuple(float(v) for v in x[1 : 1 + p]), tuple(float(v) for v in x[1 + p :])
    _check_roots(ar, ma)
    e = css_residuals(w, c, ar, ma, mu)
    css = float(np.dot(e, e))
    sigma2 = css / n
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise EstimationFailure("residual variance is not positive")
    aic = n * float(np.log(sigma2)) + 2 * order.n_params
    return ArimaModel(order, c, ar, ma, sigma2, aic, css, n, mu, fitted_on)


def _selection_key(m: ArimaModel):
    o = m.order
    return (m.aic, o.p + o.q, o.d, (o.p, o.d, o.q))


def fit_grid(y) -> dict[ArimaOrder, ArimaModel | None]:
    """Every grid order fitted to ``y`` (None where estimation failed)."""
    y = np.asarray(y, dtype=np.float64)
    fits: dict[ArimaOrder, ArimaModel | None] = {}
    for order in GRID:
        try:
            w = difference(y, order.d)
            fits[order] = css_fit(w, order, fitted_on=f"last {len(y)} points")
        except (EstimationFailure, ValueError, np.linalg.LinAlgError):
            fits[order] = None
    return fits


def select_order(y) -> ArimaModel:
    """Lowest-AIC model over the grid; ties go to fewer coefficients, then
    smaller d, then the lexicographically smaller order."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise FallbackRequired("empty series")
    usable = [m for m in fit_grid(y).values() if m is not None]
    if not usable:
        raise FallbackRequired("no grid order could be estimated")
    return min(usable, key=_selection_key)


def fit_capped(y, resolution: Resolution) -> ArimaModel | None:
    """Select an order on the capped tail of ``y``; None means use persistence."""
    tail = cap_window(y, resolution)
    try:
        return select_order(tail)
    except FallbackRequired:
        return None


def forecast(model: ArimaModel, history, h: int, residuals=None) -> np.ndarray:
    """Iterate conditional expectations ``h`` steps past the end of ``history``.

    ``history`` is on the (standardized) level scale; with d = 1 the forecast
    differences are integrated back onto it. Future shocks are zero.
    """
    y = np.asarray(history, dtype=np.float64)
    o = model.order
    if len(y) < max(o.p, o.q, o.d, 1):
        raise ValueError("history is too short for this model")
    w = difference(y, o.d) if o.d else y
    if residuals is None:
        residuals = css_residuals(w, model.intercept, model.ar, model.ma, model.presample_mean)
    w_ext = list(w[-o.p:]) if o.p else []
    w_ext = [model.presample_mean] * (o.p - len(w_ext)) + w_ext
    e_ext = list(np.asarray(residuals, dtype=np.float64)[-o.q:]) if o.q else []
    e_ext = [0.0] * (o.q - len(e_ext)) + e_ext
    out = np.empty(h)
    for k in range(h):
        val = model.intercept
        for i, phi in enumerate(model.ar, start=1):
            val += phi * w_ext[-i]
        for j, theta in enumerate(model.ma, start=1):
            val += theta * e_ext[-j]
        out[k] = val
        if o.p:
            w_ext.append(val)
        if o.q:
            e_ext.append(0.0)
    if o.d:
        out = y[-1] + np.cumsum(out)
    return out


def forecast_origins(model: ArimaModel, y_full, origins, h: int) -> np.ndarray:
    """Forecast ``h`` steps from each origin index ``o`` using ``y_full[:o]``.

    Residuals are filtered once over the whole observed series with the fitted
    parameters, so every origin sees the same in-sample residual history.
    """
    y = np.asarray(y_full, dtype=np.float64)
    o = model.order
    w = difference(y, o.d) if o.d else y
    e = css_residuals(w, model.intercept, model.ar, model.ma, model.presample_mean)
    origins = np.asarray(origins, dtype=np.int64)
    n = len(origins)
    # index of the last observed value in the differenced scale
    last = origins - 1 - o.d
    W = np.empty((n, o.p + h))
    E = np.zeros((n, o.q + h))
    for i in range(1, o.p + 1):
        idx = last - (i - 1)
        W[:, o.p - i] = np.where(idx >= 0, w[np.clip(idx, 0, None)], model.presample_mean)
    for j in range(1, o.q + 1):
        idx = last - (j - 1)
        E[:, o.q - j] = np.where(idx >= 0, e[np.clip(idx, 0, None)], 0.0)
    out = np.empty((n, h))
    for k in range(h):
        val = np.full(n, model.intercept)
        for i, phi in enumerate(model.ar, start=1):
            val = val + phi * W[:, o.p + k - i]
        for j, theta in enumerate(model.ma, start=1):
            val = val + theta * E[:, o.q + k - j]
        out[:, k] = val
        W[:, o.p + k] = val
    if o.d:
        out = y[origins - 1][:, None] + np.cumsum(out, axis=1)
    return out


def persistence_fallback(history, h: int) -> np.ndarray:
    y = np.asarray(history, dtype=np.float64)
    if not len(y):
        raise ValueError("persistence needs at least one observation")
    return np.full(h, y[-1])


def model_record(entity_id: str, model: ArimaModel | None) -> str:
    """One JSON line per entity for audit."""
    rec = {"entity_id": entity_id, "fallback": model is None}
    if model is not None:
        rec.update(model.to_record())
    return json.dumps(rec, sort_keys=True)


def model_from_record(line: str) -> tuple[str, ArimaModel | None]:
    rec = json.loads(line)
    if rec["fallback"]:
        return rec["entity_id"], None
    return rec["entity_id"], ArimaModel(
        ArimaOrder(*rec["order"]),
        rec["intercept"],
        tuple(rec["ar"]),
        tuple(rec["ma"]),
        rec["sigma2"],
        rec["aic"],
        rec["css"],
        rec["n_eff"],
        rec["presample_mean"],
        rec["fitted_on"],
    )
