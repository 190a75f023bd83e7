"""Remaining useful life from the first threshold crossing of a health curve."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .curves import GridFunction, SampledCurve
from .errors import PreconditionError


@dataclass(frozen=True)
class RulEstimate:
    value: float
    threshold: float
    last_obs_time: float
    censored: bool
    crossing_time: Optional[float] = None


def _nodes(curve):
    if isinstance(curve, GridFunction):
        return curve.grid, curve.values
    if isinstance(curve, SampledCurve):
        return curve.times, curve.values
    times, values = curve
    return np.asarray(times, dtype=float), np.asarray(values, dtype=float)


def _value_at(times, values, t):
    return float(np.interp(t, times, values))


def first_crossing(curve, theta, from_t=0.0):
    """Earliest ``t >= from_t`` where the piecewise-linear curve is ``<= theta``.

    The curve is scanned node by node; inside the first cell where it drops to
    the threshold the crossing is interpolated linearly. Returns ``None`` when
    the curve stays above ``theta`` up to its last node.
    """
    times, values = _nodes(curve)
    if from_t < times[0] or from_t > times[-1]:
        raise ValueError(f"from_t={from_t} outside the curve's domain [{times[0]}, {times[-1]}]")
    v0 = _value_at(times, values, from_t)
    if v0 <= theta:
        return float(from_t)
    k0 = int(np.searchsorted(times, from_t, side="right"))
    after = np.flatnonzero(values[k0:] <= theta)
    if after.size == 0:
        return None
    k = k0 + int(after[0])
    if k == k0:
        t_prev, v_prev = float(from_t), v0
    else:
        t_prev, v_prev = float(times[k - 1]), float(values[k - 1])
    t_k, v_k = float(times[k]), float(values[k])
    if v_k == theta:
        return t_k
    return t_prev + (v_prev - theta) / (v_prev - v_k) * (t_k - t_prev)


def _crossing_rul(curve, theta, t_star, what):
    times, values = _nodes(curve)
    end = float(times[-1])
    if not t_star < end:
        raise PreconditionError(f"{what}: last observation time {t_star:g} is not before the curve end {end:g}")
    if _value_at(times, values, t_star) <= theta:
        raise PreconditionError(
            f"{what}: health indicator is already at or below the threshold {theta:g} "
            f"at t*={t_star:g}; the unit has failed"
        )
    T = first_crossing(curve, theta, t_star)
    if T is None:
        return RulEstimate(end - t_star, float(theta), float(t_star), True, None)
    return RulEstimate(T - t_star, float(theta), float(t_star), False, T)


def estimate_rul(forecast, theta):
    """Predicted RUL from a forecast curve, measured from its observed horizon."""
    return _crossing_rul(forecast.curve, theta, forecast.observed_horizon, "forecast")


def true_rul(truth, theta, t_star):
    """Ground-truth RUL of an actual curve (sampled or on a grid)."""
    return _crossing_rul(truth, theta, t_star, "truth")
