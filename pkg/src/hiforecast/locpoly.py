"""Kernel-weighted local-linear regression primitives.

Everything here works on plain arrays; the data-model aware wrappers live in
:mod:`hiforecast.smoothing`.
"""

import warnings

import numpy as np

from .errors import BandwidthError, SmoothingWarning

# det(normal matrix) / product of its diagonal below this means the window
# holds fewer than two distinct abscissae (in some direction).
DEGENERATE_RTOL = 1e-10

# Upper bound on targets x points entries held in memory at once.
_CHUNK_ENTRIES = 2_000_000


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


def gaussian(u):
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def uniform(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, 0.5, 0.0)


def biweight(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, (15.0 / 16.0) * (1.0 - u * u) ** 2, 0.0)


KERNELS = {
    "epanechnikov": epanechnikov,
    "gaussian": gaussian,
    "uniform": uniform,
    "biweight": biweight,
}


def get_kernel(name):
    try:
        return KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


def bandwidth_ladder(M, n=10, lo=0.02, hi=0.5):
    """Logarithmically spaced candidate bandwidths on [lo*M, hi*M]."""
    return np.geomspace(lo * M, hi * M, n)


def _reference_level(y):
    # Median of equal values is exact, so constants are reproduced bit for bit.
    return float(np.median(y)) if y.size else 0.0


def local_linear_1d(t, y, targets, h, kernel="epanechnikov"):
    """Local-linear estimate of E[y | t] at each target.

    Parameters
    ----------
    t, y : array_like
        Pooled abscissae and responses.
    targets : array_like
        Points where the intercept of the local fit is returned.
    h : float
        Kernel bandwidth.
    kernel : str
        Key of :data:`KERNELS`.

    Returns
    -------
    values : ndarray
        Estimates at ``targets``.
    n_fallback : int
        Number of targets where the window held a single distinct abscissa and
        a locally-constant estimate was used instead.

    Raises
    ------
    BandwidthError
        If some target has an empty kernel window.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    kern = get_kernel(kernel)
    ref = _reference_level(y)
    yc = y - ref

    out = np.empty(targets.shape)
    degenerate = np.zeros(targets.shape, dtype=bool)
    step = max(1, _CHUNK_ENTRIES // max(1, t.size))
    for lo in range(0, targets.size, step):
        sl = slice(lo, lo + step)
        out[sl], degenerate[sl] = _ll1d_block(t, yc, targets[sl], h, kern)
    n_fallback = int(degenerate.sum())
    if n_fallback:
        warnings.warn(
            f"{n_fallback} target(s) had a single distinct abscissa in the kernel "
            "window; used locally-constant fit there",
            SmoothingWarning,
            stacklevel=2,
        )
    return out + ref, n_fallback


def _ll1d_block(t, yc, targets, h, kern):
    d = t[None, :] - targets[:, None]
    K = kern(d / h)
    Kd = K * d
    S0 = K.sum(axis=1)
    S1 = Kd.sum(axis=1)
    S2 = (Kd * d).sum(axis=1)
    T0 = K @ yc
    T1 = Kd @ yc

    empty = S0 <= 0.0
    if np.any(empty):
        bad = float(targets[np.argmax(empty)])
        raise BandwidthError(
            f"empty kernel window at t={bad:.6g} with bandwidth {h:.6g}", where=bad
        )
    det = S0 * S2 - S1 * S1
    degenerate = det <= DEGENERATE_RTOL * S0 * S2
    out = np.empty_like(S0)
    ok = ~degenerate
    out[ok] = (S2[ok] * T0[ok] - S1[ok] * T1[ok]) / det[ok]
    out[degenerate] = T0[degenerate] / S0[degenerate]
    return out, degenerate


def _unit_sums(A, starts):
    # Column sums of A within each unit block; units are contiguous.
    return np.add.reduceat(A, starts, axis=1)


def local_linear_2d_offdiag(times, resid, unit_starts, targets_s, targets_t, h, kernel="epanechnikov"):
    """Local-linear surface fitted to within-unit cross products.

    The raw data are ``resid[j] * resid[l]`` for every pair ``j != l`` that
    belongs to the same unit, located at ``(times[j], times[l])``. Pairs are
    never materialised: kernel moments are assembled from per-unit sums minus
    the excluded ``j == l`` terms.

    Parameters
    ----------
    times, resid : ndarray
        Pooled observation times and centred values, grouped by unit.
    unit_starts : ndarray of int
        Index of the first observation of every unit within ``times``.
    targets_s, targets_t : ndarray
        Row and column target points; the result has shape
        ``(len(targets_s), len(targets_t))``.
    h : float
        Bandwidth shared by both directions (product kernel).

    Returns
    -------
    surface : ndarray
    n_fallback : int
    """
    times = np.asarray(times, dtype=float)
    resid = np.asarray(resid, dtype=float)
    kern = get_kernel(kernel)
    starts = np.asarray(unit_starts, dtype=np.intp)
    targets_s = np.atleast_1d(np.asarray(targets_s, dtype=float))
    targets_t = np.atleast_1d(np.asarray(targets_t, dtype=float))
    sq = resid * resid

    def parts(targets):
        d = times[None, :] - targets[:, None]
        A0 = kern(d / h)
        A1 = A0 * d
        A2 = A1 * d
        return A0, A1, A2

    A0, A1, A2 = parts(targets_s)
    if targets_t is targets_s or np.array_equal(targets_t, targets_s):
        B0, B1, B2 = A0, A1, A2
    else:
        B0, B1, B2 = parts(targets_t)

    a0, a1, a2 = (_unit_sums(X, starts) for X in (A0, A1, A2))
    b0, b1, b2 = (_unit_sums(X, starts) for X in (B0, B1, B2))
    ae0, ae1 = _unit_sums(A0 * resid, starts), _unit_sums(A1 * resid, starts)
    be0, be1 = _unit_sums(B0 * resid, starts), _unit_sums(B1 * resid, starts)

    S00 = a0 @ b0.T - A0 @ B0.T
    S10 = a1 @ b0.T - A1 @ B0.T
    S01 = a0 @ b1.T - A0 @ B1.T
    S20 = a2 @ b0.T - A2 @ B0.T
    S02 = a0 @ b2.T - A0 @ B2.T
    S11 = a1 @ b1.T - A1 @ B1.T
    T00 = ae0 @ be0.T - (A0 * sq) @ B0.T
    T10 = ae1 @ be0.T - (A1 * sq) @ B0.T
    T01 = ae0 @ be1.T - (A0 * sq) @ B1.T

    full = a0 @ b0.T
    empty = S00 <= 1e-12 * full
    if np.any(empty):
        i, j = np.unravel_index(np.argmax(empty), empty.shape)
        where = (float(targets_s[i]), float(targets_t[j]))
        raise BandwidthError(
            f"empty kernel window at (t, t')=({where[0]:.6g}, {where[1]:.6g}) "
            f"with bandwidth {h:.6g}",
            where=where,
        )

    mats = np.stack(
        [
            np.stack([S00, S10, S01], axis=-1),
            np.stack([S10, S20, S11], axis=-1),
            np.stack([S01, S11, S02], axis=-1),
        ],
        axis=-2,
    )
    rhs = np.stack([T00, T10, T01], axis=-1)
    det = np.linalg.det(mats)
    scale = S00 * S20 * S02
    degenerate = ~(det > DEGENERATE_RTOL * scale)

    out = np.empty_like(S00)
    ok = ~degenerate
    if np.any(ok):
        sol = np.linalg.solve(mats[ok], rhs[ok][..., None])[..., 0]
        out[ok] = sol[:, 0]
    out[degenerate] = T00[degenerate] / S00[degenerate]
    n_fallback = int(degenerate.sum())
    if n_fallback:
        warnings.warn(
            f"{n_fallback} target pair(s) had a degenerate kernel window; used "
            "locally-constant fit there",
            SmoothingWarning,
            stacklevel=2,
        )
    return out, n_fallback


def cv_select_curve_bandwidth(t, y, M, kernel="epanechnikov", folds=5, ladder=None):
    """Bandwidth for smoothing a single curve, chosen by point-level k-fold CV.

    Folds interleave points (point ``j`` goes to fold ``j % folds``) so every
    fold spans the whole curve. Among candidates whose CV error is within
    rounding of the best, the largest bandwidth wins.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if ladder is None:
        ladder = bandwidth_ladder(M)
    folds = max(2, min(folds, t.size))
    fold_of = np.arange(t.size) % folds
    errors = np.full(len(ladder), np.inf)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmoothingWarning)
        for k, h in enumerate(ladder):
            sse = 0.0
            try:
                for f in range(folds):
                    train = fold_of != f
                    pred, _ = local_linear_1d(t[train], y[train], t[~train], h, kernel)
                    sse += float(np.sum((pred - y[~train]) ** 2))
            except BandwidthError:
                continue
            errors[k] = sse
    return pick_bandwidth(ladder, errors, atol=1e-24 * float(np.sum(y * y)))


def pick_bandwidth(ladder, errors, atol=0.0):
    """Smallest-error candidate; near-ties resolved toward the larger bandwidth.

    ``atol`` absorbs rounding noise when every candidate fits (almost) exactly.
    """
    errors = np.asarray(errors, dtype=float)
    if not np.any(np.isfinite(errors)):
        raise BandwidthError(
            "every candidate bandwidth left some kernel window empty; use denser "
            "data or extend the bandwidth ladder"
        )
    best = np.min(errors)
    near = errors <= best * (1.0 + 1e-8) + atol
    return float(np.max(np.asarray(ladder)[near]))
