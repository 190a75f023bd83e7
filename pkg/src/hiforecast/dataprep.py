"""Fleet ingestion and the experimental data protocol.

Covers parsing of run-to-failure sensor tables, degradation-signal
selection, operating-condition normalization, lifetime-stratified
train/test splitting, stratified truncation of test units, and a synthetic
fleet generator with a known model.
"""

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .curves import CurveSet, GridFunction, SampledCurve, make_grid, trapezoid_weights
from .errors import ConfigError, InsufficientDataError, ParseError

log = logging.getLogger(__name__)

N_SETTINGS = 3
N_SENSORS = 21
N_COLUMNS = 2 + N_SETTINGS + N_SENSORS


# --- raw tables ----------------------------------------------------------------


@dataclass(frozen=True)
class RawFleetTable:
    """Rows of ``(unit, cycle, 3 settings, 21 sensors)``.

    Rows of one unit are contiguous and their cycles run 1, 2, ... without gaps.
    Sensors are addressed 1-based as in the data documentation.
    """

    unit: np.ndarray
    cycle: np.ndarray
    settings: np.ndarray  # (n, 3)
    sensors: np.ndarray  # (n, 21)

    def __post_init__(self):
        for name, dtype in (("unit", int), ("cycle", int), ("settings", float), ("sensors", float)):
            a = np.array(getattr(self, name), dtype=dtype)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return self.unit.size

    @property
    def unit_ids(self):
        _, first = np.unique(self.unit, return_index=True)
        return [int(u) for u in self.unit[np.sort(first)]]

    def rows(self, unit):
        return np.flatnonzero(self.unit == unit)

    def sensor(self, k):
        if not 1 <= k <= self.sensors.shape[1]:
            raise ConfigError(f"sensor index {k} out of range 1..{self.sensors.shape[1]}")
        return self.sensors[:, k - 1]

    def lifetimes(self):
        return {u: int(self.cycle[self.rows(u)].max()) for u in self.unit_ids}

    def select_units(self, units):
        keep = np.isin(self.unit, list(units))
        return RawFleetTable(self.unit[keep], self.cycle[keep], self.settings[keep], self.sensors[keep])

    def with_sensors(self, sensors):
        return RawFleetTable(self.unit, self.cycle, self.settings, sensors)

    def to_curves(self, sensor, sign=1.0, units=None, M=None):
        """One oriented signal as a ``CurveSet`` with time = cycle."""
        values = sign * self.sensor(sensor)
        curves = []
        for u in self.unit_ids if units is None else units:
            r = self.rows(u)
            curves.append(SampledCurve(str(u), self.cycle[r].astype(float), values[r]))
        return CurveSet.from_curves(curves, M=M, complete=[True] * len(curves))


def parse_fleet(path):
    """Read a whitespace-separated 26-column run-to-failure table.

    Raises
    ------
    ParseError
        On unreadable files, empty tables, malformed rows (with line number),
        or cycles that are not contiguous from 1 within a unit.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read fleet table: {exc.strerror or exc}", path) from exc
    rows = []
    lines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != N_COLUMNS:
            raise ParseError(f"expected {N_COLUMNS} columns, found {len(parts)}", path, lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", path, lineno) from exc
        lines.append(lineno)
    if not rows:
        raise ParseError("fleet table is empty", path)
    data = np.array(rows)
    unit, cycle = data[:, 0], data[:, 1]
    for k in range(len(rows)):
        if unit[k] != int(unit[k]) or cycle[k] != int(cycle[k]):
            raise ParseError("unit and cycle must be integers", path, lines[k])
        if not np.all(np.isfinite(data[k])):
            raise ParseError("non-finite value", path, lines[k])
    seen = set()
    for k in range(len(rows)):
        u = int(unit[k])
        new_block = k == 0 or int(unit[k - 1]) != u
        if new_block:
            if u in seen:
                raise ParseError(f"rows of unit {u} are not contiguous", path, lines[k])
            seen.add(u)
            expected = 1
        else:
            expected = int(cycle[k - 1]) + 1
        if int(cycle[k]) != expected:
            raise ParseError(f"unit {u}: expected cycle {expected}, found {int(cycle[k])}", path, lines[k])
    table = RawFleetTable(unit, cycle, data[:, 2 : 2 + N_SETTINGS], data[:, 2 + N_SETTINGS :])
    log.info("parsed %s: %d rows, %d units", path.name, len(table), len(seen))
    return table


# --- degradation signals ---------------------------------------------------------


@dataclass(frozen=True)
class SignalChoice:
    sensor: int
    sign: float  # multiply raw values by this so the signal falls toward failure
    z: float


def _linear_residuals(t, y):
    if t.size < 3:
        return np.zeros(0)
    A = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return y - A @ coef


def drift_scores(table, tail=0.05):
    """Standardized end-of-life drift per sensor.

    For each unit the drift is the mean of the last ``tail`` fraction of
    cycles minus the mean of the first. Drifts are averaged over units and
    divided by the pooled within-unit sd left after removing a linear trend.
    Sensors with zero residual spread get ``z = 0``.
    """
    n_sensors = table.sensors.shape[1]
    z = np.zeros(n_sensors)
    for k in range(n_sensors):
        drifts, ss, dof = [], 0.0, 0
        for u in table.unit_ids:
            r = table.rows(u)
            y = table.sensors[r, k]
            n = max(1, math.ceil(tail * y.size))
            drifts.append(y[-n:].mean() - y[:n].mean())
            res = _linear_residuals(table.cycle[r].astype(float), y)
            ss += float(res @ res)
            dof += max(res.size - 2, 0)
        sd = math.sqrt(ss / dof) if dof > 0 else 0.0
        scale = max(1.0, float(np.max(np.abs(table.sensors[:, k]))))
        if sd > 1e-12 * scale:
            z[k] = float(np.mean(drifts)) / sd
    return z


def select_degradation_signals(table, z_threshold=2.0, tail=0.05):
    """Sensors whose life-end drift reaches ``z_threshold`` standard deviations.

    Returns
    -------
    list of SignalChoice
        In sensor order; ``sign = -1`` for sensors that rise toward failure.
    """
    z = drift_scores(table, tail)
    chosen = [
        SignalChoice(k + 1, -1.0 if z[k] > 0 else 1.0, float(z[k]))
        for k in range(z.size)
        if abs(z[k]) >= z_threshold
    ]
    if not chosen:
        log.warning("no sensor passes the drift threshold z >= %g", z_threshold)
    return chosen


# --- operating-condition normalization --------------------------------------------


def _kmeans(X, k, iters=100):
    """Deterministic k-means: farthest-point initialisation from the first row."""
    centers = [X[0]]
    d = np.sum((X - X[0]) ** 2, axis=1)
    for _ in range(1, k):
        centers.append(X[int(np.argmax(d))])
        d = np.minimum(d, np.sum((X - centers[-1]) ** 2, axis=1))
    C = np.array(centers)
    labels = None
    for _ in range(iters):
        dist = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            if np.any(labels == j):
                C[j] = X[labels == j].mean(axis=0)
    return C, labels


@dataclass(frozen=True)
class NormalizationMap:
    """Fitted map from operating settings to the expected sensor reading.

    ``mode`` is ``"ols"`` (intercept plus the settings), ``"cluster"``
    (per-regime means after k-means on standardized settings) or ``"none"``.
    """

    mode: str
    sensors: tuple
    params: dict = field(default_factory=dict)

    def predict(self, table, sensor):
        S = table.settings
        if self.mode == "ols":
            coef = np.array(self.params["coef"][str(sensor)])
            return coef[0] + S @ coef[1:]
        if self.mode == "cluster":
            centers = np.array(self.params["centers"])
            loc = np.array(self.params["loc"])
            scale = np.array(self.params["scale"])
            Z = (S - loc) / scale
            labels = np.argmin(np.sum((Z[:, None, :] - centers[None]) ** 2, axis=2), axis=1)
            return np.array(self.params["means"][str(sensor)])[labels]
        return np.zeros(len(table))

    def apply(self, table):
        """Subtract the predicted reading from each mapped sensor."""
        if self.mode == "none":
            return table
        sensors = np.array(table.sensors)
        for k in self.sensors:
            sensors[:, k - 1] = table.sensor(k) - self.predict(table, k)
        return table.with_sensors(sensors)

    def to_dict(self):
        return {"mode": self.mode, "sensors": list(self.sensors), "params": self.params}

    @classmethod
    def from_dict(cls, d):
        if d.get("mode") not in ("ols", "cluster", "none"):
            raise ParseError(f"unknown normalization mode {d.get('mode')!r}")
        return cls(d["mode"], tuple(int(k) for k in d["sensors"]), d.get("params", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise ParseError(f"cannot read normalization map: {exc}", path) from exc


def fit_normalization(table, sensors, mode="ols", n_conditions=6):
    """Fit the settings-to-sensor map on ``table`` (training units only)."""
    sensors = tuple(int(k) for k in sensors)
    if mode == "none":
        return NormalizationMap("none", sensors)
    if mode not in ("ols", "cluster"):
        raise ConfigError(f"normalization mode must be 'ols', 'cluster' or 'none', got {mode!r}")
    S = table.settings
    if np.all(np.ptp(S, axis=0) == 0):
        warnings.warn("operating settings are all identical; normalization skipped", UserWarning)
        return NormalizationMap("none", sensors, {"skipped": "degenerate settings"})
    if mode == "ols":
        A = np.column_stack([np.ones(len(table)), S])
        coef = {}
        for k in sensors:
            c, *_ = np.linalg.lstsq(A, table.sensor(k), rcond=None)
            coef[str(k)] = c.tolist()
        return NormalizationMap("ols", sensors, {"coef": coef})
    loc = S.mean(axis=0)
    scale = S.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (S - loc) / scale
    k = min(n_conditions, len(np.unique(Z, axis=0)))
    centers, labels = _kmeans(Z, k)
    means = {}
    for s in sensors:
        y = table.sensor(s)
        means[str(s)] = [float(y[labels == j].mean()) if np.any(labels == j) else 0.0 for j in range(k)]
    return NormalizationMap(
        "cluster",
        sensors,
        {"centers": centers.tolist(), "loc": loc.tolist(), "scale": scale.tolist(), "means": means},
    )


def normalize_operating_conditions(table, sensors, mode="ols", fit_units=None, norm_map=None):
    """Remove the operating-condition effect from ``sensors``.

    The map is fitted on ``fit_units`` (all units when None) unless a
    persisted ``norm_map`` is given, in which case it is only applied.

    Returns
    -------
    (RawFleetTable, NormalizationMap)
    """
    if norm_map is None:
        fit_table = table if fit_units is None else table.select_units(fit_units)
        norm_map = fit_normalization(fit_table, sensors, mode)
    return norm_map.apply(table), norm_map


# --- split and truncation ----------------------------------------------------------


def nearest_rank(sorted_values, p):
    """Nearest-rank percentile ``p`` in (0, 1] of an ascending array."""
    n = len(sorted_values)
    k = max(1, math.ceil(p * n - 1e-9))
    return sorted_values[min(k, n) - 1]


def lifetime_strata(lifetimes, n_strata):
    """Stratum index per unit; values equal to a cut go to the lower stratum."""
    L = np.asarray(lifetimes, dtype=float)
    s = np.sort(L)
    cuts = np.array([nearest_rank(s, k / n_strata) for k in range(1, n_strata)])
    return np.array([int(np.sum(cuts < x)) for x in L], dtype=int)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    n_strata: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.n_strata < 1:
            raise ConfigError("n_strata must be at least 1")


def split_assignment(curve_set, spec=SplitSpec()):
    """``{unit_id: (role, stratum)}`` with role ``"train"`` or ``"test"``."""
    n = len(curve_set)
    if n < spec.n_strata:
        raise InsufficientDataError(f"{n} units cannot fill {spec.n_strata} lifetime strata")
    strata = lifetime_strata(curve_set.lifetimes(), spec.n_strata)
    rng = np.random.default_rng(spec.seed)
    ids = curve_set.unit_ids
    out = {}
    for s in range(spec.n_strata):
        members = [ids[k] for k in np.flatnonzero(strata == s)]
        if not members:
            continue
        order = rng.permutation(len(members))
        n_train = int(math.floor(spec.train_fraction * len(members) + 0.5))
        for rank, k in enumerate(order):
            out[members[k]] = ("train" if rank < n_train else "test", s)
    return {u: out[u] for u in ids}


def stratified_split(curve_set, spec=SplitSpec()):
    """Lifetime-stratified random train/test split.

    The training set's ``M`` is its longest lifetime; the test set keeps the
    input bound.
    """
    assign = split_assignment(curve_set, spec)
    train_ids = [u for u, (role, _) in assign.items() if role == "train"]
    test_ids = [u for u, (role, _) in assign.items() if role == "test"]
    train = curve_set.subset(train_ids)
    train = CurveSet(train.curves, max(c.last_time for c in train.curves), train.complete)
    return train, curve_set.subset(test_ids)


@dataclass(frozen=True)
class TruncationSpec:
    percentile_cut: float = 0.8
    low_range: tuple = (0.2, 0.97)
    high_range: tuple = (0.6, 0.97)
    seed: int = 1

    def __post_init__(self):
        if not 0 < self.percentile_cut <= 1:
            raise ConfigError("percentile_cut must lie in (0, 1]")
        for name in ("low_range", "high_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 1:
                raise ConfigError(f"{name} must satisfy 0 < low <= high < 1")
            object.__setattr__(self, name, (float(lo), float(hi)))


def observed_count(r, m):
    """Measurements kept for ratio ``r`` on an ``m``-point curve, in [1, m - 1]."""
    return int(min(max(math.ceil(r * m - 1e-9), 1), m - 1))


def stratified_truncate(test, spec=TruncationSpec()):
    """Reveal a random leading fraction of each test unit.

    Units with lifetime at or below the ``percentile_cut`` lifetime draw the
    ratio from ``low_range``, longer-lived units from ``high_range``.

    Returns
    -------
    observations : CurveSet
    truths : CurveSet
    ratios : dict
        ``unit_id -> r``.
    """
    if len(test) == 0:
        raise InsufficientDataError("no test units to truncate")
    L = test.lifetimes()
    cut = nearest_rank(np.sort(L), spec.percentile_cut)
    rng = np.random.default_rng(spec.seed)
    obs, ratios = [], {}
    for c, life in zip(test.curves, L):
        if len(c) < 2:
            raise InsufficientDataError(f"unit {c.unit_id}: cannot truncate a single-point curve")
        lo, hi = spec.low_range if life <= cut else spec.high_range
        r = float(rng.uniform(lo, hi))
        ratios[c.unit_id] = r
        obs.append(c.prefix(observed_count(r, len(c))))
    return CurveSet(tuple(obs), test.M, (False,) * len(obs)), test, ratios


# --- synthetic fleets ------------------------------------------------------------


def cosine_basis(grid, n):
    """First ``n`` cosine functions, exactly orthonormal under trapezoid quadrature.

    ``phi_0 = 1/sqrt(M)`` and ``phi_k = sqrt(2/M) cos(k pi t / M)``; on a
    uniform grid with end nodes these are discretely orthogonal.
    """
    grid = np.asarray(grid, dtype=float)
    M = grid[-1]
    if n > grid.size - 1:
        raise ValueError("too many cosine functions for the grid")
    rows = [np.full(grid.size, 1 / math.sqrt(M))]
    rows += [math.sqrt(2 / M) * np.cos(k * np.pi * grid / M) for k in range(1, n)]
    return np.array(rows[:n]).reshape(n, grid.size)


def orthonormalize(functions, grid):
    """Gram-Schmidt under trapezoid quadrature (rows in, rows out)."""
    w = trapezoid_weights(grid)
    out = []
    for f in np.atleast_2d(np.asarray(functions, dtype=float)):
        g = f.copy()
        for _ in range(2):
            for q in out:
                g = g - (w @ (g * q)) * q
        norm = math.sqrt(float(w @ (g * g)))
        if norm <= 1e-10 * math.sqrt(float(w @ (f * f))):
            raise ValueError("functions are linearly dependent on the grid")
        out.append(g / norm)
    return np.array(out).reshape(-1, len(grid))


def make_truth(M, mean, eigenvalues, eigenfunctions, noise_sd=0.0, grid_size=101):
    """Assemble a known model on a uniform grid.

    ``mean`` is a callable or an array on the grid; ``eigenfunctions`` is a
    ``(P, G)`` array or a list of callables, orthonormalized under trapezoid
    quadrature.
    """
    from .fpca import FpcaModel

    grid = make_grid(M, grid_size)
    mu = mean(grid) if callable(mean) else np.asarray(mean, dtype=float)
    lam = np.asarray(eigenvalues, dtype=float).reshape(-1)
    if lam.size:
        phi = np.array([f(grid) if callable(f) else f for f in eigenfunctions], dtype=float)
        phi = orthonormalize(phi, grid)
        order = np.argsort(-lam, kind="stable")
        lam, phi = lam[order], phi[order]
    else:
        phi = np.zeros((0, grid.size))
    return FpcaModel(
        GridFunction(grid, np.broadcast_to(mu, grid.shape)),
        lam,
        phi,
        noise_sd**2,
        1.0,
        {"source": "synthetic"},
    )


def synth_fleet(
    truth,
    n,
    points=(10, 20),
    seed=0,
    failure_threshold: Optional[float] = None,
    unit_prefix="",
):
    """Noisy sampled curves from a known model.

    Parameters
    ----------
    truth : FpcaModel
        Generating model; values between grid nodes use linear interpolation,
        so ``truth`` describes the sampled curves exactly.
    n : int
        Number of units.
    points : (int, int) or int
        Sparse design: per-unit count drawn uniformly from ``[lo, hi]`` with
        times uniform on [0, M]. An integer gives that many equispaced times
        on [0, M] for every unit (dense, flagged complete).
    seed : int
    failure_threshold : float, optional
        Cut each unit after the first sample at or below this level, giving
        run-to-failure curves of varying length. Units are kept whole if they
        never reach it.

    Returns
    -------
    (CurveSet, FpcaModel)
    """
    rng = np.random.default_rng(seed)
    M = truth.M
    grid = truth.grid
    sd = math.sqrt(truth.noise_variance)
    P = truth.n_components
    dense = isinstance(points, (int, np.integer))
    curves = []
    for i in range(n):
        if dense:
            t = np.linspace(0.0, M, int(points))
        else:
            lo, hi = points
            m = int(rng.integers(lo, hi + 1))
            t = np.sort(rng.uniform(0.0, M, m))
        xi = rng.standard_normal(P) * np.sqrt(truth.eigenvalues)
        smooth = truth.mean.values + (xi @ truth.eigenfunctions if P else 0.0)
        y = np.interp(t, grid, smooth)
        if sd > 0:
            y = y + sd * rng.standard_normal(t.size)
        if failure_threshold is not None:
            below = np.flatnonzero(y <= failure_threshold)
            if below.size and below[0] >= 1:
                t, y = t[: below[0] + 1], y[: below[0] + 1]
        curves.append(SampledCurve(f"{unit_prefix}{i + 1}", t, y))
    complete = [dense] * n
    return CurveSet(tuple(curves), M, tuple(complete)), truth
