"""Property tests for the invariants each module promises."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hiforecast.baselines import SlidingWindowConfig, nn_forecast, nn_scores, sliding_window_extrapolate, sliding_window_fit
from hiforecast.curves import CurveSet, GridFunction, SampledCurve, interpolate, make_grid, trapezoid_weights
from hiforecast.dataprep import (
    SplitSpec,
    TruncationSpec,
    split_assignment,
    stratified_truncate,
    synth_fleet,
)
from hiforecast.errors import DataError
from hiforecast.evaluation import improvement, rmse_ext, rmse_rul
from hiforecast.fpca import fit
from hiforecast.generator import generate, project
from hiforecast.matcher import Forecast, batch_scores, matching_score, select_forecast
from hiforecast.rul import estimate_rul, first_crossing, true_rul
from hiforecast.smoothing import SmootherConfig, estimate_noise_variance, fit_covariance, fit_mean

from conftest import M10, level_shape_truth

G = make_grid(M10)
FIXED = SmootherConfig(bandwidth_mean=2.5, bandwidth_cov=3.0)
seeds = st.integers(0, 2**31 - 1)
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def mapped(cs, f):
    return CurveSet(tuple(SampledCurve(c.unit_id, c.times, f(c.values)) for c in cs.curves), cs.M, cs.complete)


def small_fleet(seed, n=40):
    return synth_fleet(level_shape_truth(), n, points=(8, 14), seed=seed)[0]


# --- curves --------------------------------------------------------------------------


@given(arrays(float, 101, elements=finite))
def test_interpolation_reproduces_nodes(v):
    np.testing.assert_array_equal(interpolate(GridFunction(G, v), G), v)


@given(st.floats(0.5, 100), st.integers(2, 300))
def test_trapezoid_weights_sum_to_M(M, n):
    assert trapezoid_weights(make_grid(M, n)).sum() == pytest.approx(M, rel=1e-12)


# --- smoothing -----------------------------------------------------------------------


@settings(max_examples=15)
@given(seeds, st.floats(0.2, 5), st.floats(-5, 5))
def test_mean_affine_equivariant(seed, a, b):
    cs = small_fleet(seed)
    base = fit_mean(cs, FIXED).values
    moved = fit_mean(mapped(cs, lambda v: a * v + b), FIXED).values
    np.testing.assert_allclose(moved, a * base + b, rtol=1e-9, atol=1e-9)


@settings(max_examples=10)
@given(seeds, st.floats(-5, 5))
def test_covariance_symmetric_and_shift_invariant(seed, c):
    cs = small_fleet(seed)
    mu = fit_mean(cs, FIXED)
    cov = fit_covariance(cs, mu, FIXED)
    assert np.array_equal(cov.values, cov.values.T)
    cs2 = mapped(cs, lambda v: v + c)
    cov2 = fit_covariance(cs2, fit_mean(cs2, FIXED), FIXED)
    np.testing.assert_allclose(cov2.values, cov.values, atol=1e-9)
    s1 = estimate_noise_variance(cs, mu, cov, FIXED)
    s2 = estimate_noise_variance(cs2, fit_mean(cs2, FIXED), cov2, FIXED)
    assert s1 >= 0 and s2 == pytest.approx(s1, abs=1e-9)


# --- fpca ----------------------------------------------------------------------------


@settings(max_examples=10)
@given(seeds, st.floats(0.3, 4))
def test_fit_orthonormal_and_scale_equivariant(seed, c):
    cs = small_fleet(seed)
    m = fit(cs, FIXED, 0.99)
    assert np.max(np.abs(m.gram() - np.eye(m.n_components))) <= 1e-6
    assert np.all(np.diff(m.eigenvalues) <= 0) and 0 < m.fve <= 1
    m2 = fit(mapped(cs, lambda v: c * v), FIXED, 0.99)
    np.testing.assert_allclose(m2.eigenvalues, c * c * m.eigenvalues, rtol=1e-9)


# --- generator ---------------------------------------------------------------------------


@settings(max_examples=25)
@given(seeds, st.integers(1, 60))
def test_generator_identity_projection_prefix(seed, w):
    model = level_shape_truth()
    s = generate(model, w, seed)
    np.testing.assert_allclose(s.curves, model.mean.values + s.scores @ model.eigenfunctions, rtol=0, atol=1e-12)
    np.testing.assert_allclose(project(model, s.curves), s.scores, atol=1e-8)
    assert np.array_equal(generate(model, w + 5, seed).curves[:w], s.curves)


# --- matcher ---------------------------------------------------------------------------


obs_strategy = st.builds(
    lambda seed, m: SampledCurve(
        "u",
        np.sort(np.random.default_rng(seed).uniform(0, M10, m)),
        np.random.default_rng(seed + 1).normal(1, 0.4, m),
    ),
    seeds,
    st.integers(1, 25),
)


@settings(max_examples=30)
@given(seeds, obs_strategy, st.integers(2, 80))
def test_selection_is_brute_force_min(seed, obs, w):
    s = generate(level_shape_truth(), w, seed)
    f = select_forecast(s, obs)
    brute = [matching_score(s.curve(i), obs) for i in range(w)]
    assert f.matching_score == min(brute) and f.selected_index == brute.index(min(brute))


@settings(max_examples=30)
@given(seeds, obs_strategy, st.integers(2, 40), st.integers(1, 200))
def test_more_candidates_never_worse(seed, obs, w, extra):
    model = level_shape_truth()
    small = select_forecast(generate(model, w, seed), obs)
    big = select_forecast(generate(model, w + extra, seed), obs)
    assert big.matching_score <= small.matching_score


@settings(max_examples=30)
@given(seeds, obs_strategy, st.floats(0.01, 100))
def test_selection_scale_and_order_invariant(seed, obs, c):
    s = generate(level_shape_truth(), 40, seed)
    base = select_forecast(s, obs).selected_index
    scaled = batch_scores(c * s.curves, s.grid, SampledCurve("u", obs.times, c * obs.values))
    assert int(np.argmin(scaled)) == base
    perm = np.random.default_rng(seed).permutation(40)
    H = batch_scores(s.curves[perm], s.grid, obs)
    assert perm[int(np.argmin(H))] == base


# --- rul --------------------------------------------------------------------------------


decreasing = arrays(float, 101, elements=st.floats(0, 0.2)).map(lambda d: 3 - np.cumsum(d))


@given(decreasing, st.floats(0, 3), st.floats(0, 3), st.floats(0, 9.5))
def test_rul_monotone_in_threshold(vals, a, b, t_star):
    lo, hi = sorted((a, b))
    f = Forecast(GridFunction(G, vals), 0.0, t_star)
    if np.interp(t_star, G, vals) <= hi:
        return
    assert estimate_rul(f, hi).value <= estimate_rul(f, lo).value + 1e-12


@given(arrays(float, 101, elements=st.floats(-2, 2)), st.floats(0, 2), st.floats(-1, 1), st.floats(0, 9.5))
def test_rul_shift_down_never_increases(vals, d, theta, t_star):
    base = Forecast(GridFunction(G, vals), 0.0, t_star)
    down = Forecast(GridFunction(G, vals - d), 0.0, t_star)
    if np.interp(t_star, G, vals - d) <= theta:
        return
    assert estimate_rul(down, theta).value <= estimate_rul(base, theta).value + 1e-12


@given(arrays(float, 101, elements=st.floats(-2, 2)), st.floats(-1, 1), st.floats(0, 9.5))
def test_estimate_matches_true_rul(vals, theta, t_star):
    f = Forecast(GridFunction(G, vals), 0.0, t_star)
    if np.interp(t_star, G, vals) <= theta:
        return
    a, b = estimate_rul(f, theta), true_rul(f.curve, theta, t_star)
    assert a == b
    T = first_crossing(f.curve, theta, t_star)
    assert (T is None) == a.censored
    if T is not None:
        assert np.interp(T, G, vals) == pytest.approx(theta, abs=1e-9)
        assert 0 <= a.value <= M10 - t_star


# --- baselines ---------------------------------------------------------------------------


@settings(max_examples=25)
@given(seeds, obs_strategy)
def test_nn_is_brute_force(seed, obs):
    train = synth_fleet(level_shape_truth(), 15, points=(8, 14), seed=seed)[0]
    H = nn_scores(train, obs)
    if not np.any(np.isfinite(H)):
        with pytest.raises(DataError):
            nn_forecast(train, obs)
        return
    f = nn_forecast(train, obs)
    assert f.selected_index == int(np.argmin(H)) and f.matching_score == H.min()


@given(st.floats(-3, 3), st.floats(-0.2, 0.2), st.integers(2, 12))
def test_sliding_exact_on_linear(a, b, U):
    t = np.arange(0.0, 61.0)
    train = CurveSet.from_curves([SampledCurve(str(k), t, a + k + b * t) for k in range(3)], M=60.0)
    pred = sliding_window_fit(train, SlidingWindowConfig(U, 1))
    obs = SampledCurve("n", t[:25], a + 0.5 + b * t[:25])
    f = sliding_window_extrapolate(pred, obs, 60.0)
    np.testing.assert_allclose(f.curve.values, a + 0.5 + b * f.curve.grid, atol=1e-8 * (1 + abs(a) + 60 * abs(b)))


# --- evaluation ---------------------------------------------------------------------------


@given(st.floats(0, 10), st.floats(0.01, 10))
def test_improvement_identity(a, b):
    assert improvement(a, b) == 1 - a / b
    assert improvement(b, b) == 0.0


@given(arrays(float, st.integers(1, 30), elements=st.floats(0, 100)), seeds)
def test_rmse_rul_permutation_invariant(x, seed):
    y = np.random.default_rng(seed).uniform(0, 100, x.size)
    p = np.random.default_rng(seed).permutation(x.size)
    assert rmse_rul(x[p], y[p]) == pytest.approx(rmse_rul(x, y), rel=1e-12)


@settings(max_examples=20)
@given(seeds)
def test_rmse_ext_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    truths = [SampledCurve(str(k), G[::5], rng.normal(size=21)) for k in range(5)]
    fcs = [GridFunction(G, rng.normal(size=G.size)) for _ in range(5)]
    counts = list(rng.integers(1, 21, 5))
    p = rng.permutation(5)
    assert rmse_ext([fcs[i] for i in p], [truths[i] for i in p], [counts[i] for i in p]) == pytest.approx(
        rmse_ext(fcs, truths, counts), rel=1e-12
    )


# --- dataprep --------------------------------------------------------------------------------


lifetimes = st.lists(st.integers(2, 300), min_size=5, max_size=60)


def lifeset(L):
    return CurveSet.from_curves([SampledCurve(str(k), np.arange(1.0, n + 1), np.zeros(n)) for k, n in enumerate(L)])


@given(lifetimes, seeds)
def test_split_pure_disjoint_cover(L, seed):
    cs = lifeset(L)
    a = split_assignment(cs, SplitSpec(0.7, 5, seed))
    assert a == split_assignment(cs, SplitSpec(0.7, 5, seed))
    assert set(a) == set(cs.unit_ids)
    for s in set(st_ for _, st_ in a.values()):
        members = [r for r, st_ in a.values() if st_ == s]
        assert abs(members.count("train") - 0.7 * len(members)) <= 1


@given(lifetimes, seeds)
def test_truncation_strict_partial(L, seed):
    cs = lifeset(L)
    obs, truth, r = stratified_truncate(cs, TruncationSpec(seed=seed))
    for o, t in zip(obs.curves, truth.curves):
        assert o.times[0] == t.times[0] and 1 <= len(o) < len(t)
    assert r == stratified_truncate(cs, TruncationSpec(seed=seed))[2]
