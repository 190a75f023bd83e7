import numpy as np
import pytest

from hiforecast.curves import CurveSet, GridFunction, SampledCurve, make_grid
from hiforecast.dataprep import make_truth, synth_fleet
from hiforecast.errors import BandwidthError, ConfigError, InsufficientDataError, SmoothingWarning
from hiforecast.locpoly import KERNELS, bandwidth_ladder, local_linear_1d, local_linear_2d_offdiag
from hiforecast.smoothing import (
    SmootherConfig,
    estimate_noise_variance,
    fit_covariance,
    fit_mean,
    resolve_bandwidths,
    select_bandwidth,
)

from conftest import M10, dense_set, quad_mean
from oracles import wls_local_linear, wls_local_plane


def sparse_set(fn, n, seed, M=M10, lo=10, hi=20):
    rng = np.random.default_rng(seed)
    curves = []
    for i in range(n):
        t = np.sort(rng.uniform(0, M, rng.integers(lo, hi + 1)))
        curves.append(SampledCurve(str(i), t, fn(i, t, rng)))
    return CurveSet.from_curves(curves, M=M)


# --- kernels and primitives --------------------------------------------------------


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernels_symmetric_nonnegative_unit_mass(name):
    k = KERNELS[name]
    u = np.linspace(-8, 8, 1600001)
    v = k(u)
    assert np.all(v >= 0)
    np.testing.assert_allclose(v, k(-u))
    # trapezoid error at the uniform kernel's jumps is O(du)
    assert np.trapezoid(v, u) == pytest.approx(1.0, abs=1e-5)


def test_ladder_spans_fraction_of_M():
    lad = bandwidth_ladder(50.0)
    assert len(lad) == 10
    assert lad[0] == pytest.approx(1.0) and lad[-1] == pytest.approx(25.0)
    assert np.allclose(np.diff(np.log(lad)), np.log(lad[1] / lad[0]))


def test_local_linear_matches_wls_oracle():
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 10, 300)
    y = np.sin(t) + rng.normal(0, 0.2, 300)
    targets = np.linspace(0, 10, 23)
    got, _ = local_linear_1d(t, y, targets, 1.3)
    want = [wls_local_linear(t, y, x, 1.3) for x in targets]
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_local_plane_matches_pair_enumeration_oracle():
    rng = np.random.default_rng(1)
    units = []
    for _ in range(25):
        t = np.sort(rng.uniform(0, 4, rng.integers(2, 7)))
        units.append((t, rng.normal(size=t.size)))
    times = np.concatenate([u[0] for u in units])
    resid = np.concatenate([u[1] for u in units])
    starts = np.cumsum([0] + [len(u[0]) for u in units[:-1]])
    g = np.array([0.0, 1.1, 2.5, 4.0])
    got, _ = local_linear_2d_offdiag(times, resid, starts, g, g, 1.7)
    for a, s in enumerate(g):
        for b, t in enumerate(g):
            assert got[a, b] == pytest.approx(wls_local_plane(units, s, t, 1.7), abs=1e-10)


def test_empty_window_names_grid_point():
    with pytest.raises(BandwidthError, match="t=5"):
        local_linear_1d([0.0, 1.0, 9.0, 10.0], [0, 0, 0, 0], [5.0], 1.0)


def test_single_abscissa_falls_back_with_warning():
    with pytest.warns(SmoothingWarning):
        v, n = local_linear_1d([0.0, 1.0, 1.0, 5.0], [0.0, 2.0, 4.0, 0.0], [1.0], 0.5)
    assert n == 1 and v[0] == pytest.approx(3.0)


# --- fit_mean --------------------------------------------------------------------


def test_mean_constant():
    cs = sparse_set(lambda i, t, r: np.full_like(t, 5.0), 30, 0)
    mu = fit_mean(cs, SmootherConfig(bandwidth_mean=2.0, bandwidth_cov=2.0))
    assert np.all(mu.values == 5.0)


@pytest.mark.parametrize("h", [0.8, 2.0, 5.0])
def test_mean_linear_exact_including_boundaries(h):
    cs = sparse_set(lambda i, t, r: 2 * t, 30, 1)
    mu = fit_mean(cs, SmootherConfig(bandwidth_mean=h, bandwidth_cov=2.0))
    np.testing.assert_allclose(mu.values, 2 * mu.grid, atol=1e-10)


def test_mean_oracle_recovery_noise_only():
    cs = sparse_set(lambda i, t, r: quad_mean(t) + r.normal(0, 0.1, t.size), 200, 2)
    mu = fit_mean(cs, SmootherConfig())
    assert np.max(np.abs(mu.values - quad_mean(mu.grid))) < 0.05


# --- fit_covariance ---------------------------------------------------------------


def test_cov_zero_for_curves_on_the_mean():
    # linear mean so grid interpolation of the mean is exact
    cs = sparse_set(lambda i, t, r: 1 - 0.05 * t, 40, 3)
    cfg = SmootherConfig(bandwidth_mean=2.0, bandwidth_cov=2.0)
    mean = GridFunction(make_grid(M10), 1 - 0.05 * make_grid(M10))
    cov = fit_covariance(cs, mean, cfg)
    assert np.max(np.abs(cov.values)) < 1e-10


def test_cov_random_intercept():
    rng = np.random.default_rng(4)
    a = rng.normal(0, 2.0, 500)
    cs = dense_set(lambda i, t: np.full_like(t, a[i]), 500, points=21)
    cfg = SmootherConfig(bandwidth_mean=2.0, bandwidth_cov=2.0)
    cov = fit_covariance(cs, fit_mean(cs, cfg), cfg)
    assert np.all(np.abs(cov.values - 4.0) <= 0.5)


def test_cov_rank_one_kl_oracle():
    g = make_grid(M10)
    truth = make_truth(M10, np.zeros_like(g), [2.0], [np.sin(np.pi * g / M10)])
    cs, _ = synth_fleet(truth, 300, points=(10, 20), seed=0)
    cfg = resolve_bandwidths(cs, SmootherConfig())
    cov = fit_covariance(cs, fit_mean(cs, cfg), cfg)
    T = truth.covariance().values
    assert np.linalg.norm(cov.values - T) / np.linalg.norm(T) < 0.15


def test_cov_exactly_symmetric():
    cs = sparse_set(lambda i, t, r: r.normal() * t + r.normal(0, 0.1, t.size), 60, 6)
    cfg = SmootherConfig(bandwidth_mean=2.0, bandwidth_cov=1.5)
    cov = fit_covariance(cs, fit_mean(cs, cfg), cfg)
    assert np.max(np.abs(cov.values - cov.values.T)) == 0.0


def test_cov_needs_pairs():
    cs = CurveSet.from_curves([SampledCurve(str(i), [float(i)], [1.0]) for i in range(11)], M=10.0)
    mean = GridFunction(make_grid(10.0), np.ones(101))
    with pytest.raises(InsufficientDataError):
        fit_covariance(cs, mean, SmootherConfig(bandwidth_mean=3.0, bandwidth_cov=3.0))


def test_cov_reproduces_planes_in_raw_products():
    # Raw products that lie on a plane are returned exactly by the plane fit.
    rng = np.random.default_rng(7)
    units = [np.sort(rng.uniform(0, 5, 6)) for _ in range(40)]
    times = np.concatenate(units)
    starts = np.cumsum([0] + [6] * 39)
    # constant residual per unit gives products c_i^2; use c_i = 1 -> plane z = 1
    resid = np.ones(times.size)
    g = np.linspace(0, 5, 11)
    got, _ = local_linear_2d_offdiag(times, resid, starts, g, g, 1.5)
    np.testing.assert_allclose(got, 1.0, atol=1e-10)


# --- bandwidth selection -------------------------------------------------------------


def test_select_linear_noiseless_picks_largest():
    cs = sparse_set(lambda i, t, r: 1 + 0.3 * t, 40, 8)
    lad = bandwidth_ladder(M10)
    assert select_bandwidth(cs, SmootherConfig(), "mean") == pytest.approx(lad[-1])


def test_select_leave_one_unit_out_on_ten_units():
    cs = sparse_set(lambda i, t, r: quad_mean(t) + r.normal(0, 0.1, t.size), 10, 9, lo=15, hi=20)
    h = select_bandwidth(cs, SmootherConfig(cv_folds=10), "mean")
    assert np.any(np.isclose(h, bandwidth_ladder(M10)))


def test_select_folds_exceeding_units():
    cs = sparse_set(lambda i, t, r: t, 4, 10)
    with pytest.raises(InsufficientDataError):
        select_bandwidth(cs, SmootherConfig(cv_folds=5), "mean")


def test_select_curved_mean_returns_ladder_member():
    cs = sparse_set(lambda i, t, r: quad_mean(t) + r.normal(0, 0.1, t.size), 100, 11)
    h, errs = select_bandwidth(cs, SmootherConfig(), "mean", return_errors=True)
    assert h in bandwidth_ladder(M10) and len(errs) == 10


def test_select_all_infeasible():
    cs = CurveSet.from_curves([SampledCurve(str(i), [0.0, 10.0], [0.0, 1.0]) for i in range(6)], M=10.0)
    with pytest.raises(BandwidthError, match="denser"):
        select_bandwidth(cs, SmootherConfig(), "mean", ladder=[0.5, 1.0])


def test_config_validation():
    with pytest.raises(ConfigError):
        SmootherConfig(bandwidth_mean=-1.0)
    with pytest.raises(ConfigError):
        SmootherConfig(cv_folds=1)
    with pytest.raises(ConfigError):
        SmootherConfig.from_dict({"kernal": "gaussian"})
    assert SmootherConfig.from_dict({"kernel_1d": "biweight"}).kernel == "biweight"


# --- noise variance ------------------------------------------------------------------


def _dense_noise_fleet(sd, seed, n=300):
    g = make_grid(M10)
    truth = make_truth(M10, quad_mean, [0.05], [np.ones_like(g)], noise_sd=sd)
    cs, _ = synth_fleet(truth, n, points=41, seed=seed)
    return cs


def _sigma2(cs, cfg=SmootherConfig(bandwidth_mean=1.0, bandwidth_cov=1.5)):
    mean = fit_mean(cs, cfg)
    cov = fit_covariance(cs, mean, cfg)
    return estimate_noise_variance(cs, mean, cov, cfg)


def test_noise_zero_for_noiseless():
    cs = _dense_noise_fleet(0.0, 12)
    _, values, _ = cs.pooled()
    assert _sigma2(cs) <= 1e-3 * np.var(values)


def test_noise_oracle_sd_half():
    assert 0.20 <= _sigma2(_dense_noise_fleet(0.5, 13)) <= 0.30


def test_noise_quadruples_when_sd_doubles():
    a = _sigma2(_dense_noise_fleet(0.2, 14))
    b = _sigma2(_dense_noise_fleet(0.4, 14))
    assert b / a == pytest.approx(4.0, rel=0.2)


def test_noise_invariant_to_constant_shift():
    cs = _dense_noise_fleet(0.3, 15, n=60)
    shifted = CurveSet(tuple(SampledCurve(c.unit_id, c.times, c.values + 7.5) for c in cs.curves), cs.M, cs.complete)
    assert _sigma2(shifted) == pytest.approx(_sigma2(cs), abs=1e-9)
