"""Forecast accuracy metrics and the method comparison harness."""

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines, generator, matcher
from .errors import DataError, HiForecastError, InsufficientDataError, PreconditionError, SmoothingWarning
from .fpca import DEFAULT_FVE, fit as fit_fpca
from .rul import RulEstimate, estimate_rul, true_rul
from .smoothing import SmootherConfig

log = logging.getLogger(__name__)

BASELINES = ("nn", "nn-s", "rg-linear", "gp-posterior")
CENSOR_POLICIES = ("exclude", "cap")


# --- metrics -------------------------------------------------------------------


def _curve_of(f):
    return f.curve if isinstance(f, matcher.Forecast) else f


def ext_residuals(forecast, truth, observed_count):
    """Forecast minus truth from the last observed point to end of life.

    Truth points past the forecast's lifespan bound cannot be scored; they are
    dropped and counted.

    Returns
    -------
    residuals : ndarray
    n_beyond : int
    """
    curve = _curve_of(forecast)
    m_star = int(observed_count)
    if not 1 <= m_star <= len(truth):
        raise DataError(f"unit {truth.unit_id}: observed count {m_star} outside 1..{len(truth)}")
    t = truth.times[m_star - 1 :]
    y = truth.values[m_star - 1 :]
    inside = t <= curve.M * (1 + 1e-12)
    res = curve(t[inside]) - y[inside] if np.any(inside) else np.zeros(0)
    return np.atleast_1d(res), int(np.sum(~inside))


def rmse_ext(forecasts, truths, observed_counts):
    """Pooled RMSE over the unobserved part of every unit.

    Each unit contributes ``m_i - m_i* + 1`` terms, indices ``m_i*`` to
    ``m_i`` counted from 1, so the last observed point is included.
    """
    if not (len(forecasts) == len(truths) == len(observed_counts)):
        raise ValueError("forecasts, truths and observed counts must align")
    sse, n = 0.0, 0
    for f, truth, m_star in zip(forecasts, truths, observed_counts):
        r, _ = ext_residuals(f, truth, m_star)
        sse += float(r @ r)
        n += r.size
    if n == 0:
        raise InsufficientDataError("no held-out points to score")
    return math.sqrt(sse / n)


def rmse_rul(rul_true, rul_pred, censored=None, policy="exclude", rul_mse=False):
    """Root-mean-square RUL error.

    ``censored`` flags predictions without a threshold crossing. Under
    ``"exclude"`` they are left out; under ``"cap"`` they enter with their
    capped value. ``rul_mse`` drops the square root.
    """
    a = np.asarray(rul_true, dtype=float)
    b = np.asarray(rul_pred, dtype=float)
    if a.shape != b.shape:
        raise ValueError("rul_true and rul_pred must have equal length")
    if policy not in CENSOR_POLICIES:
        raise ValueError(f"censor policy must be one of {CENSOR_POLICIES}")
    keep = np.ones(a.size, dtype=bool)
    n_cens = 0
    if censored is not None:
        cens = np.asarray(censored, dtype=bool)
        n_cens = int(cens.sum())
        if policy == "exclude":
            keep = ~cens
    if not np.any(keep):
        raise InsufficientDataError(f"no RUL pairs left to score ({n_cens} censored, {a.size} total)")
    d = a[keep] - b[keep]
    mse = float(np.mean(d * d))
    return mse if rul_mse else math.sqrt(mse)


def improvement(metric_proposed, metric_baseline):
    """``1 - proposed / baseline``."""
    if metric_baseline == 0:
        raise DataError("improvement is undefined when the baseline metric is 0")
    return 1.0 - metric_proposed / metric_baseline


# --- forecasting harness -----------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    theta: Optional[float]
    methods: tuple = matcher.METHODS
    w: int = generator.DEFAULT_W
    master_seed: int = 0
    fve_threshold: float = DEFAULT_FVE
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    sliding: baselines.SlidingWindowConfig = field(default_factory=baselines.SlidingWindowConfig)
    censor_policy: str = "exclude"
    rul_mse: bool = False
    per_unit_scenarios: bool = False
    nn_s_bandwidth: Optional[float] = None

    def __post_init__(self):
        bad = [m for m in self.methods if m not in matcher.METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; valid: {', '.join(matcher.METHODS)}")
        if self.censor_policy not in CENSOR_POLICIES:
            raise ValueError(f"censor policy must be one of {CENSOR_POLICIES}")
        object.__setattr__(self, "methods", tuple(self.methods))


class Forecaster:
    """Builds method-specific state lazily and produces forecasts per unit."""

    def __init__(self, train, cfg, model=None):
        self.train = train
        self.cfg = cfg
        self._model = model
        self._scenarios = None
        self._predictor = None

    @property
    def model(self):
        if self._model is None:
            self._model = fit_fpca(self.train, self.cfg.smoother, self.cfg.fve_threshold)
        return self._model

    def scenarios(self, unit_index=None):
        if unit_index is not None and self.cfg.per_unit_scenarios:
            seed = int(np.random.SeedSequence([self.cfg.master_seed, unit_index]).generate_state(1)[0])
            return generator.generate(self.model, self.cfg.w, seed)
        if self._scenarios is None:
            self._scenarios = generator.generate(self.model, self.cfg.w, self.cfg.master_seed)
        return self._scenarios

    @property
    def predictor(self):
        if self._predictor is None:
            self._predictor = baselines.sliding_window_fit(self.train, self.cfg.sliding)
        return self._predictor

    def forecast(self, method, obs, unit_index=None):
        if method == "proposed":
            return matcher.select_forecast(self.scenarios(unit_index), obs)
        if method == "nn":
            return baselines.nn_forecast(self.train, obs, self.model.grid)
        if method == "nn-s":
            f = baselines.nn_forecast(self.train, obs, self.model.grid)
            # sparse matched units often trip the smoother's fallback; log rather than warn per unit
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", SmoothingWarning)
                out = baselines.smooth_forecast(f, obs, self.cfg.nn_s_bandwidth, self.cfg.smoother.kernel)
            for w in caught:
                log.debug("unit %s nn-s: %s", obs.unit_id, w.message)
            return out
        if method == "rg-linear":
            return baselines.sliding_window_extrapolate(self.predictor, obs, self.model.M, self.model.grid)
        if method == "gp-posterior":
            return baselines.gp_posterior_forecast(self.model, obs)
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(matcher.METHODS)}")


def predicted_rul(forecast, theta):
    """RUL from a forecast; a forecast already at or below ``theta`` at t* gives 0."""
    try:
        return estimate_rul(forecast, theta)
    except PreconditionError:
        t = forecast.observed_horizon
        return RulEstimate(0.0, float(theta), float(t), False, float(t))


# --- report --------------------------------------------------------------------


@dataclass
class MethodResult:
    signal: str
    method: str
    rmse_ext: Optional[float]
    rmse_rul: Optional[float]
    censored_count: int
    n_test: int
    n_failed: int = 0
    n_ext_points: int = 0
    n_beyond_m: int = 0
    n_rul_pairs: int = 0
    n_truth_unusable: int = 0


@dataclass
class EvalReport:
    results: list = field(default_factory=list)
    improvements: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    residuals: list = field(default_factory=list)  # (signal, method, unit, time, truth, forecast)
    ruls: list = field(default_factory=list)  # per-unit RUL rows

    def get(self, signal, method):
        for r in self.results:
            if r.signal == signal and r.method == method:
                return r
        raise KeyError((signal, method))

    @property
    def signals(self):
        return sorted({r.signal for r in self.results}, key=_natural)

    @property
    def methods(self):
        seen = []
        for r in self.results:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def merge(self, other):
        self.results.extend(other.results)
        self.improvements.update(other.improvements)
        self.failures.extend(other.failures)
        self.residuals.extend(other.residuals)
        self.ruls.extend(other.ruls)
        for k, v in other.provenance.items():
            self.provenance.setdefault(k, v)
        return self

    def compute_improvements(self):
        for sig in self.signals:
            rows = {r.method: r for r in self.results if r.signal == sig}
            if "proposed" not in rows:
                continue
            imp = {}
            for metric in ("rmse_ext", "rmse_rul"):
                base = [(getattr(r, metric), m) for m, r in rows.items() if m in BASELINES and getattr(r, metric) is not None]
                p = getattr(rows["proposed"], metric)
                if not base or p is None:
                    imp[metric] = None
                    continue
                best, which = min(base)
                try:
                    imp[metric] = {"value": improvement(p, best), "best_baseline": which}
                except DataError:
                    imp[metric] = {"value": None, "best_baseline": which}
            self.improvements[sig] = imp
        return self

    def to_dict(self):
        return {
            "results": [asdict(r) for r in self.results],
            "improvements": self.improvements,
            "failures": self.failures,
            "provenance": self.provenance,
        }

    def _table(self, metric):
        sigs = self.signals
        rows = [["method"] + sigs]
        for m in self.methods:
            row = [m]
            for s in sigs:
                try:
                    v = getattr(self.get(s, m), metric)
                except KeyError:
                    v = None
                row.append("" if v is None else f"{v:.6g}")
            rows.append(row)
        imp_row = ["IMP"]
        for s in sigs:
            v = (self.improvements.get(s) or {}).get(metric)
            imp_row.append("" if not v or v.get("value") is None else f"{v['value']:.6g}")
        rows.append(imp_row)
        return rows

    def write(self, directory):
        """``report.json``, two method-by-signal tables, residual and RUL CSVs."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        for metric, name in (("rmse_ext", "table_rmse_ext.csv"), ("rmse_rul", "table_rmse_rul.csv")):
            _write_rows(d / name, self._table(metric))
        _write_rows(
            d / "residuals.csv",
            [["signal", "method", "unit_id", "time", "truth", "forecast", "residual"]]
            + [[s, m, u, repr(t), repr(y), repr(f), repr(f - y)] for s, m, u, t, y, f in self.residuals],
        )
        _write_rows(
            d / "rul.csv",
            [["signal", "unit_id", "method", "theta", "t_star", "rul_true", "rul_pred", "censored"]] + self.ruls,
        )
        return d


def _write_rows(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _natural(s):
    return [int(p) if p.isdigit() else p for p in str(s).replace("_", " ").split()]


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def run_comparison(train, test_obs, test_truth, cfg, signal="signal", model=None, forecasts=None):
    """Evaluate every configured method on one signal.

    Parameters
    ----------
    train, test_obs, test_truth : CurveSet
        ``test_obs`` holds the revealed prefix of each unit in ``test_truth``.
    cfg : EvalConfig
    model : FpcaModel, optional
        Reused instead of refitting.
    forecasts : dict, optional
        ``{(method, unit_id): Forecast}`` computed elsewhere; missing entries
        are produced here.

    A method failing on a unit is recorded in ``failures`` and the unit is
    left out of that method's metrics.
    """
    truths = {c.unit_id: c for c in test_truth.curves}
    engine = Forecaster(train, cfg, model)
    report = EvalReport()
    theta = None if cfg.theta is None else float(cfg.theta)
    true_cache = {}
    for method in cfg.methods:
        fc_list, tr_list, counts = [], [], []
        rul_t, rul_p, cens = [], [], []
        n_failed = n_beyond = n_truth_bad = 0
        for k, obs in enumerate(test_obs.curves):
            truth = truths[obs.unit_id]
            try:
                f = None if forecasts is None else forecasts.get((method, obs.unit_id))
                if f is None:
                    f = engine.forecast(method, obs, k)
            except HiForecastError as exc:
                n_failed += 1
                report.failures.append({"signal": signal, "method": method, "unit_id": obs.unit_id, "error": str(exc)})
                continue
            m_star = len(obs)
            res, beyond = ext_residuals(f, truth, m_star)
            n_beyond += beyond
            fc_list.append(f)
            tr_list.append(truth)
            counts.append(m_star)
            t_held = truth.times[m_star - 1 : m_star - 1 + res.size]
            for t, r in zip(t_held, res):
                y = float(truth.values[np.searchsorted(truth.times, t)])
                report.residuals.append((signal, method, obs.unit_id, float(t), y, y + float(r)))
            if theta is None:
                continue
            if obs.unit_id not in true_cache:
                try:
                    true_cache[obs.unit_id] = true_rul(truth, theta, obs.last_time)
                except PreconditionError:
                    true_cache[obs.unit_id] = None
            rt = true_cache[obs.unit_id]
            if rt is None:
                n_truth_bad += 1
                continue
            rp = predicted_rul(f, theta)
            rul_t.append(rt.value)
            rul_p.append(rp.value)
            cens.append(rp.censored)
            report.ruls.append(
                [signal, obs.unit_id, method, repr(theta), repr(obs.last_time), repr(rt.value), repr(rp.value), int(rp.censored)]
            )
        ext = rmse_ext(fc_list, tr_list, counts) if fc_list else None
        try:
            rul = rmse_rul(rul_t, rul_p, cens, cfg.censor_policy, cfg.rul_mse) if rul_t else None
        except InsufficientDataError:
            rul = None
        n_pairs = len(rul_t) - (sum(cens) if cfg.censor_policy == "exclude" else 0)
        report.results.append(
            MethodResult(
                signal=signal,
                method=method,
                rmse_ext=ext,
                rmse_rul=rul,
                censored_count=int(sum(cens)),
                n_test=len(test_obs),
                n_failed=n_failed,
                n_ext_points=int(sum(len(t) - c + 1 for t, c in zip(tr_list, counts)) - n_beyond),
                n_beyond_m=n_beyond,
                n_rul_pairs=int(n_pairs),
                n_truth_unusable=n_truth_bad,
            )
        )
        log.info("%s/%s: rmse_ext=%s rmse_rul=%s failed=%d", signal, method, ext, rul, n_failed)
    report.provenance = {
        "theta": {signal: theta},
        "w": cfg.w,
        "master_seed": cfg.master_seed,
        "censor_policy": cfg.censor_policy,
        "rul_mse": cfg.rul_mse,
    }
    if engine._model is not None:
        report.provenance.setdefault("models", {})[signal] = engine._model.provenance
    return report.compute_improvements()
