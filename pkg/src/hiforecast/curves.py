"""Sampled health-indicator curves, fleets, and grid-carried functions."""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError, ParseError, PreconditionError

DEFAULT_GRID_SIZE = 101


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def make_grid(M, size=DEFAULT_GRID_SIZE):
    """Uniform grid of ``size`` points covering [0, M]."""
    if not M > 0:
        raise ValueError(f"lifespan bound must be positive, got {M}")
    if size < 2:
        raise ValueError("grid needs at least 2 points")
    return np.linspace(0.0, float(M), int(size))


def trapezoid_weights(grid):
    grid = np.asarray(grid, dtype=float)
    w = np.empty_like(grid)
    dx = np.diff(grid)
    w[0] = dx[0] / 2
    w[-1] = dx[-1] / 2
    w[1:-1] = (dx[:-1] + dx[1:]) / 2
    return w


@dataclass(frozen=True)
class SampledCurve:
    """One unit's observed health indicator."""

    unit_id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "unit_id", str(self.unit_id))
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError(f"unit {self.unit_id}: times and values must be 1-d of equal length")
        if self.times.size < 1:
            raise ValueError(f"unit {self.unit_id}: curve needs at least one observation")

    def __len__(self):
        return self.times.size

    @property
    def last_time(self):
        return float(self.times[-1])

    def prefix(self, n):
        """First ``n`` observations as a new curve."""
        return SampledCurve(self.unit_id, self.times[:n], self.values[:n])

    def problems(self):
        """Invariant violations as a list of strings (empty when well-formed)."""
        out = []
        bad = np.flatnonzero(~np.isfinite(self.values))
        for j in bad:
            out.append(f"unit {self.unit_id}: non-finite value at index {j}")
        bad_t = np.flatnonzero(~np.isfinite(self.times))
        for j in bad_t:
            out.append(f"unit {self.unit_id}: non-finite time at index {j}")
        steps = np.diff(self.times)
        for j in np.flatnonzero(~(steps > 0)):
            out.append(f"unit {self.unit_id}: times not strictly increasing at index {j + 1}")
        return out


@dataclass(frozen=True)
class GridFunction:
    """Real function carried by its values on a uniform grid over [0, M]."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", _frozen(self.grid))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.grid.shape != self.values.shape or self.grid.ndim != 1:
            raise ValueError("grid and values must be 1-d of equal length")
        if self.grid.size < 2:
            raise ValueError("grid needs at least 2 points")

    @property
    def M(self):
        return float(self.grid[-1])

    def __call__(self, t):
        return interpolate(self, t)

    def integral(self):
        return float(trapezoid_weights(self.grid) @ self.values)


@dataclass(frozen=True)
class CovarianceSurface:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", _frozen(self.grid))
        object.__setattr__(self, "values", _frozen(self.values))
        G = self.grid.size
        if self.values.shape != (G, G):
            raise ValueError(f"covariance values must be {G}x{G}")

    @property
    def M(self):
        return float(self.grid[-1])

    def diagonal(self):
        return GridFunction(self.grid, np.diag(self.values))

    def __call__(self, s, t):
        """Bilinear interpolation at paired points ``(s[k], t[k])``."""
        i, fs = _cell(self.grid, s)
        j, ft = _cell(self.grid, t)
        V = self.values
        return (
            V[i, j] * (1 - fs) * (1 - ft)
            + V[i + 1, j] * fs * (1 - ft)
            + V[i, j + 1] * (1 - fs) * ft
            + V[i + 1, j + 1] * fs * ft
        )


@dataclass(frozen=True)
class CurveSet:
    """A fleet of curves sharing a lifespan bound ``M``."""

    curves: tuple
    lifespan_bound: float
    complete: Optional[tuple] = None

    def __post_init__(self):
        curves = tuple(self.curves)
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "lifespan_bound", float(self.lifespan_bound))
        complete = self.complete
        if complete is None:
            complete = (False,) * len(curves)
        complete = tuple(bool(c) for c in complete)
        if len(complete) != len(curves):
            raise ValueError("one completeness flag per curve is required")
        object.__setattr__(self, "complete", complete)
        if not self.lifespan_bound > 0:
            raise ValueError("lifespan bound M must be positive")
        ids = [c.unit_id for c in curves]
        if len(set(ids)) != len(ids):
            raise ValueError("unit ids must be unique within a CurveSet")

    @classmethod
    def from_curves(cls, curves, M=None, complete=None):
        curves = tuple(curves)
        if M is None:
            M = max(c.last_time for c in curves)
        return cls(curves, M, complete)

    def __len__(self):
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    @property
    def M(self):
        return self.lifespan_bound

    @property
    def unit_ids(self):
        return [c.unit_id for c in self.curves]

    def by_id(self, unit_id):
        for c in self.curves:
            if c.unit_id == str(unit_id):
                return c
        raise KeyError(unit_id)

    def subset(self, unit_ids, M=None):
        wanted = [str(u) for u in unit_ids]
        index = {c.unit_id: k for k, c in enumerate(self.curves)}
        picked = [index[u] for u in wanted]
        return CurveSet(
            tuple(self.curves[k] for k in picked),
            self.lifespan_bound if M is None else M,
            tuple(self.complete[k] for k in picked),
        )

    def lifetimes(self):
        return np.array([c.last_time for c in self.curves])

    def pooled(self):
        """Concatenated ``(times, values, unit_starts)``; units stay contiguous."""
        times = np.concatenate([c.times for c in self.curves])
        values = np.concatenate([c.values for c in self.curves])
        lengths = np.array([len(c) for c in self.curves])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)
        return times, values, starts


def _cell(grid, t):
    t = np.asarray(t, dtype=float)
    i = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, grid.size - 2)
    frac = (t - grid[i]) / (grid[i + 1] - grid[i])
    return i, frac


def interpolate(f, t):
    """Piecewise-linear value of grid function ``f`` at ``t`` (scalar or array).

    Raises
    ------
    DomainError
        If any ``t`` lies outside [0, M].
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    grid = f.grid
    tol = 1e-12 * max(1.0, abs(grid[-1]))
    if np.any(~np.isfinite(t)) or np.any(t < grid[0] - tol) or np.any(t > grid[-1] + tol):
        bad = t[~((t >= grid[0] - tol) & (t <= grid[-1] + tol))]
        raise DomainError(f"t={bad[0]!r} outside [{grid[0]:g}, {grid[-1]:g}]")
    t = np.clip(t, grid[0], grid[-1])
    i, frac = _cell(grid, t)
    v = f.values
    out = v[i] * (1.0 - frac) + v[i + 1] * frac
    return float(out[0]) if scalar else out


def interpolation_weights(grid, t):
    """``(lo_index, frac)`` such that value = v[lo]*(1-frac) + v[lo+1]*frac."""
    return _cell(np.asarray(grid, dtype=float), t)


def resample_piecewise(times, values, targets):
    """Linear interpolation through samples, holding end values outside them."""
    return np.interp(targets, times, values)


def smooth_curve_to_grid(curve, grid, bandwidth=None, kernel="epanechnikov", folds=5):
    """Local-linear recovery of one densely sampled curve on ``grid``."""
    from .locpoly import cv_select_curve_bandwidth, local_linear_1d

    M = float(grid[-1])
    h = bandwidth
    if h is None:
        h = cv_select_curve_bandwidth(curve.times, curve.values, M, kernel, folds)
    values, _ = local_linear_1d(curve.times, curve.values, grid, h, kernel)
    return values, h


def dense_mean_cov(curve_set, grid_size=DEFAULT_GRID_SIZE, bandwidth=None, kernel="epanechnikov"):
    """Cross-sectional mean and covariance of complete curves.

    Each curve is first recovered on the grid with the local-linear smoother
    (``bandwidth=None`` selects one per curve by cross-validation); the mean is
    the pointwise average and the covariance divides by ``N - 1``.
    """
    if not all(curve_set.complete):
        bad = [c.unit_id for c, ok in zip(curve_set.curves, curve_set.complete) if not ok]
        raise PreconditionError(f"dense_mean_cov needs complete curves; incomplete: {bad[:5]}")
    N = len(curve_set)
    if N < 2:
        raise InsufficientDataError("dense_mean_cov needs at least 2 curves")
    grid = make_grid(curve_set.M, grid_size)
    X = np.empty((N, grid.size))
    for k, c in enumerate(curve_set.curves):
        X[k], _ = smooth_curve_to_grid(c, grid, bandwidth, kernel)
    mean = X.mean(axis=0)
    R = X - mean
    cov = (R.T @ R) / (N - 1)
    cov = (cov + cov.T) / 2
    return GridFunction(grid, mean), CovarianceSurface(grid, cov)


def validate(curve_set, max_gap_fraction=0.1):
    """List invariant violations without touching the data."""
    report = []
    M = curve_set.M
    for c in curve_set.curves:
        report.extend(c.problems())
        finite_t = c.times[np.isfinite(c.times)]
        if finite_t.size and (finite_t.min() < 0 or finite_t.max() > M * (1 + 1e-12)):
            report.append(f"unit {c.unit_id}: times outside [0, {M:g}]")
    pooled = np.concatenate([c.times[np.isfinite(c.times)] for c in curve_set.curves] or [[]])
    if pooled.size:
        pts = np.unique(np.concatenate([[0.0], np.clip(pooled, 0, M), [M]]))
        gap = float(np.max(np.diff(pts))) if pts.size > 1 else M
        if gap >= max_gap_fraction * M:
            report.append(
                f"coverage gap: pooled observation times leave a gap of {gap:g} "
                f"(>= {max_gap_fraction:g} * M)"
            )
    else:
        report.append("coverage gap: no observations")
    return report


# --- curve CSV ---------------------------------------------------------------

CURVE_HEADER = ["unit_id", "time", "value"]


def _sort_key(uid):
    try:
        return (0, float(uid), uid)
    except ValueError:
        return (1, 0.0, uid)


def read_curves(path, M=None, complete=False):
    """Load a ``unit_id,time,value`` CSV; rows may come in any order."""
    path = Path(path)
    groups = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open curve file: {exc.strerror}", path) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CURVE_HEADER:
            raise ParseError(f"expected header {','.join(CURVE_HEADER)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", path, lineno)
            uid = row[0].strip()
            try:
                t, v = float(row[1]), float(row[2])
            except ValueError:
                raise ParseError("time and value must be numeric", path, lineno) from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise ParseError("non-finite time or value", path, lineno)
            groups.setdefault(uid, []).append((t, v))
    if not groups:
        raise ParseError("no curve rows", path)
    curves = []
    for uid in sorted(groups, key=_sort_key):
        pts = sorted(groups[uid])
        times = np.array([p[0] for p in pts])
        if np.any(np.diff(times) <= 0):
            raise ParseError(f"unit {uid}: duplicate time points", path)
        curves.append(SampledCurve(uid, times, [p[1] for p in pts]))
    flags = (complete,) * len(curves)
    return CurveSet.from_curves(curves, M=M, complete=flags)


def write_curves(curves, path):
    """Write curves (an iterable of SampledCurve) as ``unit_id,time,value``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for c in curves:
            for t, v in zip(c.times, c.values):
                w.writerow([c.unit_id, repr(float(t)), repr(float(v))])


def write_grid_functions(rows: Sequence, path, id_name="scenario_id"):
    """Write ``(id, GridFunction)`` pairs as ``id,time,value`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_name, "time", "value"])
        for ident, f in rows:
            for t, v in zip(f.grid, f.values):
                w.writerow([ident, repr(float(t)), repr(float(v))])
