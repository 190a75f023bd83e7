"""Comparison forecasters: nearest neighbour (raw and smoothed), sliding-window
linear regression, and Gaussian-process conditional expectation."""

from dataclasses import dataclass

import numpy as np

from .curves import GridFunction, interpolation_weights, make_grid
from .errors import DataError, InsufficientDataError, NumericalError
from .locpoly import cv_select_curve_bandwidth, local_linear_1d
from .matcher import Forecast, _check_obs, matching_score


# --- nearest neighbour -------------------------------------------------------


def _nn_score(train_curve, obs):
    """RMSE over the observations that fall inside the training curve's span."""
    t0, t1 = train_curve.times[0], train_curve.times[-1]
    inside = (obs.times >= t0) & (obs.times <= t1)
    if not np.any(inside):
        return np.inf
    pred = np.interp(obs.times[inside], train_curve.times, train_curve.values)
    diff = pred - obs.values[inside]
    return float(np.sqrt(np.mean(diff * diff)))


def nn_scores(train, obs):
    return np.array([_nn_score(c, obs) for c in train.curves])


def nn_forecast(train, obs, grid=None):
    """Forecast with the best-matching training curve itself.

    Training curves that end before the observation horizon are scored on the
    overlap only. The chosen curve is resampled to the grid, holding its last
    value past its own end of life.
    """
    if len(train) == 0:
        raise InsufficientDataError("no training curves")
    if grid is None:
        grid = make_grid(train.M)
    if len(obs) == 0:
        raise DataError("observation is empty")
    H = nn_scores(train, obs)
    if not np.any(np.isfinite(H)):
        raise DataError(f"unit {obs.unit_id}: no training curve overlaps the observed period")
    sel = int(np.argmin(H))
    src = train.curves[sel]
    values = np.interp(grid, src.times, src.values)
    extended = bool(src.times[-1] < grid[-1])
    return Forecast(
        curve=GridFunction(grid, values),
        matching_score=float(H[sel]),
        observed_horizon=obs.last_time,
        method="nn",
        selected_index=sel,
        unit_id=obs.unit_id,
        extras={
            "matched_unit": src.unit_id,
            "extended_by_holding": extended,
            "source": src,
        },
    )


def smooth_forecast(forecast, obs, bandwidth=None, kernel="epanechnikov", folds=5):
    """Local-linear smoothing of a forecast (the ``nn-s`` baseline).

    The smoother runs on the matched unit's raw samples when the forecast
    carries them, otherwise on the grid values. ``bandwidth=None`` picks one
    from the usual ladder by point-level cross-validation.
    """
    grid = forecast.curve.grid
    src = forecast.extras.get("source")
    if src is not None:
        t, y = src.times, src.values
    else:
        t, y = grid, forecast.curve.values
    h = bandwidth if bandwidth is not None else cv_select_curve_bandwidth(t, y, grid[-1], kernel, folds)
    inside = grid <= t[-1]
    values = np.empty(grid.size)
    values[inside], _ = local_linear_1d(t, y, grid[inside], h, kernel)
    if not inside.all():
        # past the matched unit's end of life: hold the last smoothed value
        last, _ = local_linear_1d(t, y, [t[-1]], h, kernel)
        values[~inside] = last[0]
    curve = GridFunction(grid, values)
    extras = {k: v for k, v in forecast.extras.items()}
    extras["smoothing_bandwidth"] = float(h)
    return Forecast(
        curve=curve,
        matching_score=matching_score(curve, obs),
        observed_horizon=forecast.observed_horizon,
        method="nn-s",
        selected_index=forecast.selected_index,
        unit_id=forecast.unit_id,
        extras=extras,
    )


# --- sliding-window linear regression ----------------------------------------


@dataclass(frozen=True)
class SlidingWindowConfig:
    window_in: int = 30
    window_out: int = 1
    step: float = 1.0

    def __post_init__(self):
        if self.window_in < 1 or self.window_out < 1:
            raise ValueError("window sizes must be at least 1")
        if not self.step > 0:
            raise ValueError("step must be positive")


@dataclass(frozen=True)
class LinearPredictor:
    coef: np.ndarray  # (V, U + 1); column 0 is the intercept
    config: SlidingWindowConfig

    def predict(self, window):
        window = np.asarray(window, dtype=float)
        return self.coef[:, 0] + self.coef[:, 1:] @ window


def _unit_spaced(times, values, step):
    n = int(np.floor((times[-1] - times[0]) / step + 1e-9)) + 1
    t = times[0] + step * np.arange(n)
    return t, np.interp(t, times, values)


def sliding_window_fit(train, cfg=SlidingWindowConfig()):
    """Ordinary least squares from ``U`` past values to the next ``V``, pooled over units."""
    U, V = cfg.window_in, cfg.window_out
    X, Y = [], []
    for c in train.curves:
        _, y = _unit_spaced(c.times, c.values, cfg.step)
        n = y.size - U - V + 1
        if n <= 0:
            continue
        idx = np.arange(n)[:, None]
        X.append(y[idx + np.arange(U)])
        Y.append(y[idx + U + np.arange(V)])
    if not X:
        raise InsufficientDataError(f"no training curve has at least U+V={U + V} resampled values")
    X = np.vstack(X)
    Y = np.vstack(Y)
    design = np.hstack([np.ones((X.shape[0], 1)), X])
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    return LinearPredictor(coef.T.copy(), cfg)


def sliding_window_extrapolate(predictor, obs, horizon, grid=None):
    """Roll the window forward from the observations until ``horizon``."""
    cfg = predictor.config
    U, V = cfg.window_in, cfg.window_out
    if len(obs) == 0:
        raise DataError("observation is empty")
    t, y = _unit_spaced(obs.times, obs.values, cfg.step)
    if y.size < U:
        raise DataError(f"unit {obs.unit_id}: {y.size} resampled observations, window needs {U}")
    series = list(y)
    t_last = t[-1]
    while t_last < horizon:
        nxt = predictor.predict(series[-U:])
        series.extend(nxt.tolist())
        t_last += V * cfg.step
    times = t[0] + cfg.step * np.arange(len(series))
    if grid is None:
        grid = make_grid(horizon)
    values = np.interp(grid, times, series)
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"unit {obs.unit_id}: sliding-window extrapolation diverged")
    curve = GridFunction(grid, values)
    return Forecast(
        curve=curve,
        matching_score=matching_score(curve, obs),
        observed_horizon=obs.last_time,
        method="rg-linear",
        unit_id=obs.unit_id,
    )


# --- Gaussian-process conditional expectation ---------------------------------


def posterior_scores(model, obs):
    """Conditional expectation of the scores given noisy observations."""
    _check_obs(obs, model.grid)
    P = model.n_components
    if P == 0:
        return np.zeros(0)
    i, frac = interpolation_weights(model.grid, obs.times)
    phi = model.eigenfunctions
    Phi = (phi[:, i] * (1.0 - frac) + phi[:, i + 1] * frac).T  # (m, P)
    mu = model.mean.values[i] * (1.0 - frac) + model.mean.values[i + 1] * frac
    lam = model.eigenvalues
    K = (Phi * lam) @ Phi.T
    m = obs.times.size
    ridge = model.noise_variance
    if ridge <= 0:
        ridge = 1e-10 * np.trace(K) / m
    A = K + ridge * np.eye(m)
    try:
        alpha = np.linalg.solve(A, obs.values - mu)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"unit {obs.unit_id}: singular posterior system ({exc})") from exc
    if not np.all(np.isfinite(alpha)):
        raise NumericalError(f"unit {obs.unit_id}: non-finite posterior solve")
    return lam * (Phi.T @ alpha)


def gp_posterior_forecast(model, obs):
    """Posterior-mean curve under the truncated Gaussian-process prior."""
    xi = posterior_scores(model, obs)
    values = model.mean.values.copy()
    if xi.size:
        values = values + xi @ model.eigenfunctions
    curve = GridFunction(model.grid, values)
    return Forecast(
        curve=curve,
        matching_score=matching_score(curve, obs),
        observed_horizon=obs.last_time,
        method="gp-posterior",
        unit_id=obs.unit_id,
        extras={"posterior_scores": [float(x) for x in xi]},
    )
