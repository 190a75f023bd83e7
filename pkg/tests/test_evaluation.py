import csv
import json

import numpy as np
import pytest

from hiforecast.baselines import SlidingWindowConfig
from hiforecast.curves import CurveSet, GridFunction, SampledCurve, make_grid
from hiforecast.dataprep import TruncationSpec, stratified_truncate, synth_fleet
from hiforecast.errors import DataError, InsufficientDataError
from hiforecast.evaluation import (
    EvalConfig,
    EvalReport,
    MethodResult,
    config_hash,
    ext_residuals,
    improvement,
    predicted_rul,
    rmse_ext,
    rmse_rul,
    run_comparison,
)
from hiforecast.generator import generate
from hiforecast.matcher import Forecast
from hiforecast.smoothing import SmootherConfig

from conftest import M10, level_shape_truth

G = make_grid(M10)


def truth_curve(values_fn, uid="u", n=11):
    t = np.linspace(0, M10, n)
    return SampledCurve(uid, t, values_fn(t))


# --- metrics -----------------------------------------------------------------------


def test_rmse_ext_perfect():
    tr = truth_curve(lambda t: 1 - t / 20)
    f = GridFunction(G, 1 - G / 20)
    assert rmse_ext([f], [tr], [4]) == pytest.approx(0.0, abs=1e-15)


def test_rmse_ext_two_residuals():
    tr = SampledCurve("u", [0.0, 5.0, 10.0], [0.0, 0.0, 0.0])
    f = GridFunction(G, np.interp(G, [0, 5, 10], [9.0, 1.0, -1.0]))
    assert rmse_ext([f], [tr], [2]) == pytest.approx(1.0)


def test_rmse_ext_counts_last_observed_point():
    tr = truth_curve(np.zeros_like)
    res, beyond = ext_residuals(GridFunction(G, np.ones_like(G)), tr, 7)
    assert res.size == 11 - 7 + 1 and beyond == 0


def test_rmse_ext_homogeneous(rng):
    trs = [truth_curve(np.sin, str(k)) for k in range(3)]
    fs = [GridFunction(G, np.sin(G) + rng.normal(0, 0.1, G.size)) for _ in range(3)]
    base = rmse_ext(fs, trs, [3, 5, 8])
    doubled = [GridFunction(G, np.sin(G) + 2 * (f.values - np.sin(G))) for f in fs]
    assert rmse_ext(doubled, trs, [3, 5, 8]) == pytest.approx(2 * base, rel=1e-12)


def test_rmse_ext_points_beyond_M_dropped():
    tr = SampledCurve("u", np.arange(0.0, 13.0), np.zeros(13))
    res, beyond = ext_residuals(GridFunction(G, np.zeros_like(G)), tr, 10)
    assert beyond == 2 and res.size == 2


def test_rmse_ext_bad_count():
    with pytest.raises(DataError):
        ext_residuals(GridFunction(G, G), truth_curve(np.sin), 0)


def test_rmse_rul_examples():
    assert rmse_rul([5, 6], [5, 6]) == 0.0
    assert rmse_rul([10, 10], [7, 14]) == pytest.approx(np.sqrt(12.5))
    assert rmse_rul([10, 10], [7, 14], rul_mse=True) == pytest.approx(12.5)


def test_rmse_rul_censoring():
    assert rmse_rul([1, 2, 3], [1, 2, 100], [False, False, True]) == 0.0
    assert rmse_rul([1, 2, 3], [1, 2, 5], [False, False, True], policy="cap") == pytest.approx(np.sqrt(4 / 3))
    with pytest.raises(InsufficientDataError, match="2 censored"):
        rmse_rul([1, 2], [3, 4], [True, True])


def test_improvement_examples():
    assert improvement(0.250, 0.441) == pytest.approx(0.4331, abs=5e-5)
    assert improvement(0.3, 0.3) == 0.0
    assert improvement(1.0, 2.0) == 0.5
    with pytest.raises(DataError):
        improvement(1.0, 0.0)


def test_predicted_rul_zero_when_already_failed():
    f = Forecast(GridFunction(G, 1 - G / 10), 0.0, 6.0)
    r = predicted_rul(f, 0.5)
    assert r.value == 0.0 and not r.censored


# --- harness ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fleet():
    truth = level_shape_truth(noise_sd=0.05)
    train, _ = synth_fleet(truth, 80, points=(10, 20), seed=0)
    test, _ = synth_fleet(truth, 12, points=41, seed=1, unit_prefix="t")
    obs, full, _ = stratified_truncate(test, TruncationSpec(seed=0))
    return truth, train, obs, full


FAST = dict(
    w=200,
    smoother=SmootherConfig(bandwidth_mean=2.0, bandwidth_cov=2.0),
    nn_s_bandwidth=1.0,
    sliding=SlidingWindowConfig(5, 1, step=0.25),
)


def test_proposed_exact_when_truth_in_span():
    truth = level_shape_truth(noise_sd=0.0)
    s = generate(truth, 30, 7)
    curves = [SampledCurve(f"t{k}", G, s.curves[k]) for k in (3, 11, 25)]
    full = CurveSet.from_curves(curves, complete=[True] * 3)
    obs, _, _ = stratified_truncate(full, TruncationSpec(seed=0))
    cfg = EvalConfig(theta=None, methods=("proposed",), w=30, master_seed=7)
    rep = run_comparison(CurveSet((), M10), obs, full, cfg, model=truth)
    assert rep.get("signal", "proposed").rmse_ext < 1e-3


def test_nn_memorizes_training_duplicates(fleet):
    # sampled on the grid nodes so resampling the match is exact
    train, _ = synth_fleet(fleet[0], 20, points=101, seed=3)
    full = CurveSet(train.curves[:6], train.M, (True,) * 6)
    obs, _, _ = stratified_truncate(full, TruncationSpec(seed=0))
    cfg = EvalConfig(theta=None, methods=("nn",), **FAST)
    rep = run_comparison(train, obs, full, cfg)
    assert rep.get("signal", "nn").rmse_ext == pytest.approx(0.0, abs=1e-12)


def test_single_method_rows(fleet):
    _, train, obs, full = fleet
    rep = run_comparison(train, obs, full, EvalConfig(theta=0.3, methods=("gp-posterior",), **FAST))
    assert [r.method for r in rep.results] == ["gp-posterior"]
    assert rep.improvements == {}


def test_full_run_reproducible_and_written(fleet, tmp_path):
    _, train, obs, full = fleet
    cfg = EvalConfig(theta=0.3, **FAST)
    a = run_comparison(train, obs, full, cfg, signal="hi")
    b = run_comparison(train, obs, full, cfg, signal="hi")
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    for r in a.results:
        assert r.rmse_ext is not None and r.rmse_ext >= 0
    imp = a.improvements["hi"]["rmse_ext"]
    best = min(a.get("hi", m).rmse_ext for m in ("nn", "nn-s", "rg-linear", "gp-posterior"))
    assert imp["value"] == pytest.approx(1 - a.get("hi", "proposed").rmse_ext / best)
    a.write(tmp_path)
    rows = list(csv.reader(open(tmp_path / "table_rmse_ext.csv")))
    assert rows[0] == ["method", "hi"] and rows[-1][0] == "IMP" and len(rows) == 7
    rul_rows = list(csv.reader(open(tmp_path / "rul.csv")))
    assert rul_rows[0][:3] == ["signal", "unit_id", "method"]


def test_permutation_invariant(fleet):
    _, train, obs, full = fleet
    cfg = EvalConfig(theta=0.3, methods=("gp-posterior", "nn"), **FAST)
    a = run_comparison(train, obs, full, cfg)
    rev = CurveSet(obs.curves[::-1], obs.M, obs.complete[::-1])
    b = run_comparison(train, rev, full, cfg)
    for m in ("gp-posterior", "nn"):
        assert a.get("signal", m).rmse_ext == pytest.approx(b.get("signal", m).rmse_ext, rel=1e-12)
        assert a.get("signal", m).rmse_rul == pytest.approx(b.get("signal", m).rmse_rul, rel=1e-12)


def test_failures_recorded_not_fatal(fleet):
    _, train, obs, full = fleet
    cfg = EvalConfig(theta=None, methods=("rg-linear", "nn"), **dict(FAST, sliding=SlidingWindowConfig(20, 1, step=0.25)))
    rep = run_comparison(train, obs, full, cfg)
    r = rep.get("signal", "rg-linear")
    assert r.n_failed == len(rep.failures) and r.n_failed > 0
    assert rep.get("signal", "nn").n_failed == 0


def test_report_merge_and_imp_none():
    a = EvalReport([MethodResult("s1", "proposed", 1.0, None, 0, 3)]).compute_improvements()
    b = EvalReport([MethodResult("s2", "nn", 2.0, None, 0, 3)])
    a.merge(b)
    assert a.signals == ["s1", "s2"] and a.improvements["s1"]["rmse_ext"] is None


def test_config_hash_stable():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(theta=1.0, methods=("lstm",))
    with pytest.raises(ValueError):
        EvalConfig(theta=1.0, censor_policy="drop")
