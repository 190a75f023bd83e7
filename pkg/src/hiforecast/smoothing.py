"""Pooled local-linear estimation of the mean function and covariance surface.

Both estimators borrow strength across units, so they apply to dense and to
sparse/irregular designs alike. Bandwidths are either fixed or picked by
k-fold cross-validation over units.
"""

import warnings
from dataclasses import asdict, dataclass, replace
from typing import Union

import numpy as np

from .curves import DEFAULT_GRID_SIZE, CovarianceSurface, GridFunction, make_grid
from .errors import BandwidthError, ConfigError, InsufficientDataError, SmoothingWarning
from .locpoly import (
    KERNELS,
    bandwidth_ladder,
    local_linear_1d,
    local_linear_2d_offdiag,
    pick_bandwidth,
)

__all__ = [
    "SmootherConfig",
    "CovarianceSurface",
    "fit_mean",
    "fit_covariance",
    "select_bandwidth",
    "resolve_bandwidths",
    "estimate_noise_variance",
    "raw_covariance_pairs",
]


@dataclass(frozen=True)
class SmootherConfig:
    kernel: str = "epanechnikov"
    bandwidth_mean: Union[float, str] = "auto"
    bandwidth_cov: Union[float, str] = "auto"
    cv_folds: int = 5
    grid_size: int = DEFAULT_GRID_SIZE

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}; choose from {sorted(KERNELS)}")
        for name in ("bandwidth_mean", "bandwidth_cov"):
            h = getattr(self, name)
            if isinstance(h, str):
                if h != "auto":
                    raise ConfigError(f"{name} must be a positive number or 'auto'")
            elif not (isinstance(h, (int, float)) and h > 0):
                raise ConfigError(f"{name} must be a positive number or 'auto', got {h!r}")
        if int(self.cv_folds) < 2:
            raise ConfigError("cv_folds must be at least 2")
        if int(self.grid_size) < 3:
            raise ConfigError("grid_size must be at least 3")

    @property
    def kernel_2d(self):
        return f"product({self.kernel},{self.kernel})"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "kernel_1d" in d:
            d["kernel"] = d.pop("kernel_1d")
        unknown = set(d) - {"kernel", "bandwidth_mean", "bandwidth_cov", "cv_folds", "grid_size"}
        if unknown:
            raise ConfigError(f"unknown smoother option(s): {sorted(unknown)}")
        return cls(**d)


def _grid(curve_set, cfg):
    return make_grid(curve_set.M, cfg.grid_size)


def fit_mean(curve_set, cfg=SmootherConfig()):
    """Local-linear mean function on the model grid.

    Raises
    ------
    BandwidthError
        If the kernel window around some grid point holds no observation.
    """
    times, values, _ = curve_set.pooled()
    if times.size == 0:
        raise InsufficientDataError("no observations to smooth")
    h = cfg.bandwidth_mean
    if h == "auto":
        h = select_bandwidth(curve_set, cfg, "mean")
    grid = _grid(curve_set, cfg)
    mu, _ = local_linear_1d(times, values, grid, float(h), cfg.kernel)
    return GridFunction(grid, mu)


def raw_covariance_pairs(curve_set, mean):
    """Centred pooled data ``(times, residuals, unit_starts)`` for the covariance fit."""
    times, values, starts = curve_set.pooled()
    resid = values - mean(times)
    return times, resid, starts


def _has_pairs(curve_set):
    return any(len(c) >= 2 for c in curve_set.curves)


def fit_covariance(curve_set, mean, cfg=SmootherConfig()):
    """Local-linear covariance surface from within-unit pairs ``j != l``.

    The same-time products are left out, so measurement-error variance does
    not leak onto the diagonal. The result is symmetrised exactly.
    """
    if not _has_pairs(curve_set):
        raise InsufficientDataError("covariance needs at least one unit with two or more observations")
    h = cfg.bandwidth_cov
    if h == "auto":
        h = select_bandwidth(curve_set, cfg, "covariance", mean=mean)
    times, resid, starts = raw_covariance_pairs(curve_set, mean)
    grid = mean.grid
    surface, _ = local_linear_2d_offdiag(times, resid, starts, grid, grid, float(h), cfg.kernel)
    surface = (surface + surface.T) / 2
    return CovarianceSurface(grid, surface)


def resolve_bandwidths(curve_set, cfg):
    """Copy of ``cfg`` with every ``"auto"`` bandwidth replaced by a number."""
    if cfg.bandwidth_mean == "auto":
        cfg = replace(cfg, bandwidth_mean=select_bandwidth(curve_set, cfg, "mean"))
    if cfg.bandwidth_cov == "auto":
        mean = fit_mean(curve_set, cfg)
        cfg = replace(cfg, bandwidth_cov=select_bandwidth(curve_set, cfg, "covariance", mean=mean))
    return cfg


def _folds(n_units, k):
    fold_of = np.arange(n_units) % k
    return [np.flatnonzero(fold_of == f) for f in range(k)]


def _mean_feasible(times, grid, h, kernel):
    if kernel == "gaussian":
        return True
    s = np.sort(times)
    lo = np.searchsorted(s, grid - h, side="right")
    hi = np.searchsorted(s, grid + h, side="left")
    return bool(np.all(hi > lo))


def _cov_feasible(curve_set, grid, h, kernel):
    if kernel == "gaussian":
        return True
    # Every grid pair needs at least one within-unit pair j != l in its window.
    times, _, starts = curve_set.pooled()
    near = (np.abs(times[None, :] - grid[:, None]) < h).astype(float)
    per_unit = np.add.reduceat(near, starts, axis=1)
    n_pairs = per_unit @ per_unit.T - near @ near.T
    return bool(np.all(n_pairs > 0.5))


def _cv_mean(curve_set, cfg, ladder):
    folds = _folds(len(curve_set), cfg.cv_folds)
    curves = curve_set.curves
    errors = np.zeros(len(ladder))
    grid = _grid(curve_set, cfg)
    all_times, all_values, _ = curve_set.pooled()
    for k, h in enumerate(ladder):
        if not _mean_feasible(all_times, grid, h, cfg.kernel):
            errors[k] = np.inf
            continue
        sse = 0.0
        for held in folds:
            held_set = set(held.tolist())
            tr_t = np.concatenate([c.times for i, c in enumerate(curves) if i not in held_set])
            tr_y = np.concatenate([c.values for i, c in enumerate(curves) if i not in held_set])
            te_t = np.concatenate([curves[i].times for i in held])
            te_y = np.concatenate([curves[i].values for i in held])
            inside = (te_t >= tr_t.min()) & (te_t <= tr_t.max())
            try:
                pred, _ = local_linear_1d(tr_t, tr_y, te_t[inside], h, cfg.kernel)
            except BandwidthError:
                sse = np.inf
                break
            sse += float(np.sum((pred - te_y[inside]) ** 2))
        errors[k] = sse
    scale = float(np.sum(all_values**2))
    return errors, scale


def _cv_covariance(curve_set, cfg, ladder, mean_bandwidth):
    folds = _folds(len(curve_set), cfg.cv_folds)
    curves = curve_set.curves
    grid = _grid(curve_set, cfg)
    errors = np.zeros(len(ladder))
    # Mean fits per fold do not depend on the covariance bandwidth.
    fold_data = []
    for held in folds:
        held_set = set(held.tolist())
        train = [c for i, c in enumerate(curves) if i not in held_set]
        test = [curves[i] for i in held]
        tr_t = np.concatenate([c.times for c in train])
        tr_y = np.concatenate([c.values for c in train])
        lo, hi = tr_t.min(), tr_t.max()
        try:
            mu_tr, _ = local_linear_1d(tr_t, tr_y, tr_t, mean_bandwidth, cfg.kernel)
            te_t = np.concatenate([c.times for c in test])
            inside = (te_t >= lo) & (te_t <= hi)
            mu_te = np.full(te_t.shape, np.nan)
            mu_te[inside], _ = local_linear_1d(tr_t, tr_y, te_t[inside], mean_bandwidth, cfg.kernel)
        except BandwidthError:
            fold_data.append(None)
            continue
        lengths = np.array([len(c) for c in train])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)
        sub = grid[(grid >= lo) & (grid <= hi)]
        sub = np.unique(np.concatenate([[lo], sub, [hi]]))
        # held-out raw covariance pairs, j != l, both times inside the range
        pairs_s, pairs_t, raw = [], [], []
        offset = 0
        for c in test:
            e = c.values - mu_te[offset : offset + len(c)]
            offset += len(c)
            ok = np.isfinite(e)
            tt, ee = c.times[ok], e[ok]
            if tt.size < 2:
                continue
            J, L = np.meshgrid(np.arange(tt.size), np.arange(tt.size), indexing="ij")
            off = J != L
            pairs_s.append(tt[J[off]])
            pairs_t.append(tt[L[off]])
            raw.append(ee[J[off]] * ee[L[off]])
        if not raw:
            fold_data.append(None)
            continue
        fold_data.append(
            (tr_t, tr_y - mu_tr, starts, sub, np.concatenate(pairs_s), np.concatenate(pairs_t), np.concatenate(raw))
        )
    scale = 0.0
    for k, h in enumerate(ladder):
        if not _cov_feasible(curve_set, grid, h, cfg.kernel):
            errors[k] = np.inf
            continue
        sse = 0.0
        used = 0
        for fd in fold_data:
            if fd is None:
                continue
            tr_t, tr_e, starts, sub, ps, pt, raw = fd
            try:
                surf, _ = local_linear_2d_offdiag(tr_t, tr_e, starts, sub, sub, h, cfg.kernel)
            except BandwidthError:
                sse = np.inf
                break
            surf = (surf + surf.T) / 2
            pred = CovarianceSurface(sub, surf)(ps, pt) if _uniform(sub) else _bilinear(sub, surf, ps, pt)
            sse += float(np.sum((pred - raw) ** 2))
            scale = max(scale, float(np.sum(raw**2)))
            used += 1
        errors[k] = sse if used else np.inf
    return errors, scale


def _uniform(x):
    d = np.diff(x)
    return bool(np.allclose(d, d[0], rtol=1e-12, atol=0))


def _bilinear(nodes, V, s, t):
    i = np.clip(np.searchsorted(nodes, s, side="right") - 1, 0, nodes.size - 2)
    j = np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, nodes.size - 2)
    fs = (s - nodes[i]) / (nodes[i + 1] - nodes[i])
    ft = (t - nodes[j]) / (nodes[j + 1] - nodes[j])
    return (
        V[i, j] * (1 - fs) * (1 - ft)
        + V[i + 1, j] * fs * (1 - ft)
        + V[i, j + 1] * (1 - fs) * ft
        + V[i + 1, j + 1] * fs * ft
    )


def select_bandwidth(curve_set, cfg, target, mean=None, ladder=None, return_errors=False):
    """Bandwidth minimising unit-level k-fold cross-validated squared error.

    Parameters
    ----------
    curve_set : CurveSet
    cfg : SmootherConfig
        Kernel, fold count, and (for ``target="covariance"``) the mean
        bandwidth used to centre the data within each fold.
    target : {"mean", "covariance"}
    mean : GridFunction, optional
        Unused for the mean; accepted for symmetry with the covariance call.
    ladder : array_like, optional
        Candidate bandwidths; defaults to 10 log-spaced values in [0.02M, 0.5M].
    return_errors : bool
        Also return the CV error of each candidate (``inf`` = infeasible).

    Raises
    ------
    BandwidthError
        If every candidate leaves a kernel window empty.
    """
    n = len(curve_set)
    if cfg.cv_folds > n:
        raise InsufficientDataError(f"cv_folds={cfg.cv_folds} exceeds the number of units ({n})")
    if ladder is None:
        ladder = bandwidth_ladder(curve_set.M)
    ladder = np.asarray(ladder, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmoothingWarning)
        if target == "mean":
            errors, scale = _cv_mean(curve_set, cfg, ladder)
        elif target == "covariance":
            hm = cfg.bandwidth_mean
            if hm == "auto":
                hm = select_bandwidth(curve_set, cfg, "mean")
            errors, scale = _cv_covariance(curve_set, cfg, ladder, float(hm))
        else:
            raise ValueError(f"target must be 'mean' or 'covariance', got {target!r}")
    h = pick_bandwidth(ladder, errors, atol=1e-24 * scale)
    return (h, errors) if return_errors else h


def estimate_noise_variance(curve_set, mean, cov, cfg=SmootherConfig(), bandwidth=None):
    """Measurement-error variance from the diagonal gap.

    Same-time squared residuals are smoothed into ``V(t)``; the estimate is the
    average of ``V(t) - G(t, t)`` over the middle half of [0, M], clipped at 0.
    """
    if not np.array_equal(mean.grid, cov.grid):
        raise ValueError("mean and covariance must share a grid")
    h = bandwidth
    if h is None:
        h = cfg.bandwidth_cov
        if h == "auto":
            h = select_bandwidth(curve_set, cfg, "covariance", mean=mean)
    times, values, _ = curve_set.pooled()
    r2 = (values - mean(times)) ** 2
    grid = mean.grid
    M = grid[-1]
    V, _ = local_linear_1d(times, r2, grid, float(h), cfg.kernel)
    mid = (grid >= 0.25 * M) & (grid <= 0.75 * M)
    gap = V[mid] - np.diag(cov.values)[mid]
    return max(0.0, float(np.mean(gap)))
