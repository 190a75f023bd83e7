"""Functional principal components of a fitted covariance surface."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curves import CovarianceSurface, GridFunction, trapezoid_weights
from .errors import InsufficientDataError, ParseError, PreconditionError
from .smoothing import (
    SmootherConfig,
    estimate_noise_variance,
    fit_covariance,
    fit_mean,
    resolve_bandwidths,
)

DEFAULT_FVE = 0.95
MODEL_FORMAT = "hiforecast.fpca/1"


@dataclass(frozen=True)
class FpcaModel:
    """Mean, leading eigenpairs and noise level of a Gaussian-process prior.

    ``eigenfunctions`` is a ``(P, G)`` array on ``mean.grid``; ``P`` may be 0.
    """

    mean: GridFunction
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    noise_variance: float
    fve: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        lam = np.array(self.eigenvalues, dtype=float).reshape(-1)
        G = self.mean.grid.size
        phi = np.array(self.eigenfunctions, dtype=float).reshape(lam.size, G)
        lam.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenfunctions", phi)
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        object.__setattr__(self, "fve", float(self.fve))
        if np.any(lam <= 0) or np.any(np.diff(lam) > 0):
            raise ValueError("eigenvalues must be positive and non-increasing")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")
        if not 0 < self.fve <= 1:
            raise ValueError("fve must lie in (0, 1]")

    @property
    def grid(self):
        return self.mean.grid

    @property
    def M(self):
        return self.mean.M

    @property
    def n_components(self):
        return self.eigenvalues.size

    def eigenfunction(self, r):
        return GridFunction(self.grid, self.eigenfunctions[r])

    def gram(self):
        """Trapezoid inner products of the eigenfunctions."""
        w = trapezoid_weights(self.grid)
        return (self.eigenfunctions * w) @ self.eigenfunctions.T

    def covariance(self):
        """``sum_r lambda_r phi_r(s) phi_r(t)`` on the grid."""
        phi = self.eigenfunctions
        return CovarianceSurface(self.grid, (phi.T * self.eigenvalues) @ phi)

    def check(self, tol=1e-6):
        """Raise ``PreconditionError`` unless eigenfunctions are quadrature-orthonormal."""
        P = self.n_components
        if P and np.max(np.abs(self.gram() - np.eye(P))) > tol:
            raise PreconditionError("eigenfunctions are not orthonormal under trapezoid quadrature")

    # --- serialisation -------------------------------------------------------

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "lifespan_bound": self.M,
            "grid": self.grid.tolist(),
            "mean": self.mean.values.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "noise_variance": self.noise_variance,
            "fve": self.fve,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT:
            raise ParseError(f"not a model file (format {d.get('format')!r})")
        grid = np.array(d["grid"], dtype=float)
        P = len(d["eigenvalues"])
        phi = np.array(d["eigenfunctions"], dtype=float).reshape(P, grid.size)
        return cls(
            mean=GridFunction(grid, d["mean"]),
            eigenvalues=d["eigenvalues"],
            eigenfunctions=phi,
            noise_variance=d["noise_variance"],
            fve=d["fve"],
            provenance=d.get("provenance", {}),
        )

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        # json writes floats with repr(), which round-trips doubles exactly
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ParseError(f"cannot read model: {exc}", path) from exc
        try:
            return cls.from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed model file: {exc}", path) from exc


def eigendecompose(cov, atol=0.0):
    """Eigenpairs of the covariance integral operator, largest first.

    The operator is discretised with trapezoid weights ``w``; the symmetric
    matrix ``W^1/2 G W^1/2`` is diagonalised and its eigenvectors mapped back
    by ``W^-1/2``, which makes the eigenfunctions orthonormal under the same
    quadrature. Eigenvalues not exceeding ``max(atol, rtol * largest)`` are
    dropped, negatives included. Signs are fixed so that each eigenfunction
    integrates to a non-negative number (value at t=0 breaks ties).

    Returns
    -------
    list of (float, GridFunction)
    """
    G = np.asarray(cov.values, dtype=float)
    if not np.array_equal(G, G.T):
        asym = np.max(np.abs(G - G.T))
        scale = max(np.max(np.abs(G)), np.finfo(float).tiny)
        if asym > 1e-12 * scale:
            raise PreconditionError(f"covariance surface is not symmetric (max asymmetry {asym:.3g})")
        G = (G + G.T) / 2
    grid = cov.grid
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    lam, vec = np.linalg.eigh(sw[:, None] * G * sw[None, :])
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    if lam.size == 0 or lam[0] <= 0:
        return []
    rtol = 1e-12 * grid.size
    keep = lam > max(atol, rtol * lam[0])
    out = []
    for value, v in zip(lam[keep], vec[:, keep].T):
        phi = v / sw
        integral = float(w @ phi)
        tie = abs(integral) <= 1e-10 * float(w @ np.abs(phi))
        if integral < 0 or (tie and phi[0] < 0):
            phi = -phi
        out.append((float(value), GridFunction(grid, phi)))
    return out


def select_truncation(eigenvalues, fve_threshold=DEFAULT_FVE):
    """Smallest ``P`` whose leading eigenvalues explain ``fve_threshold`` of the total."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        raise InsufficientDataError("no eigenvalues to truncate")
    if not 0 < fve_threshold <= 1:
        raise ValueError("fve_threshold must lie in (0, 1]")
    ratio = np.cumsum(lam) / lam.sum()
    return int(np.argmax(ratio >= fve_threshold - 1e-12) + 1)


def fit(curve_set, smoother_cfg=SmootherConfig(), fve_threshold=DEFAULT_FVE):
    """Fit the prior: mean, covariance, noise variance, and truncated eigenbasis."""
    cfg = resolve_bandwidths(curve_set, smoother_cfg)
    mean = fit_mean(curve_set, cfg)
    cov = fit_covariance(curve_set, mean, cfg)
    sigma2 = estimate_noise_variance(curve_set, mean, cov, cfg)
    # Eigenvalues below roundoff of the data scale carry no signal.
    _, values, _ = curve_set.pooled()
    scale = float(np.max(np.abs(values))) if values.size else 0.0
    atol = (1e-8 * scale) ** 2 * curve_set.M
    pairs = eigendecompose(cov, atol=atol)
    if pairs:
        lam_all = np.array([p[0] for p in pairs])
        P = select_truncation(lam_all, fve_threshold)
        fve = float(lam_all[:P].sum() / lam_all.sum())
    else:
        P, fve = 0, 1.0
    G = mean.grid.size
    lam = np.array([p[0] for p in pairs[:P]])
    phi = np.array([p[1].values for p in pairs[:P]]).reshape(P, G)
    provenance = {
        "kernel": cfg.kernel,
        "kernel_2d": cfg.kernel_2d,
        "bandwidth_mean": float(cfg.bandwidth_mean),
        "bandwidth_cov": float(cfg.bandwidth_cov),
        "cv_folds": int(cfg.cv_folds),
        "grid_size": int(G),
        "fve_threshold": float(fve_threshold),
        "n_units": len(curve_set),
        "n_positive_eigenvalues": len(pairs),
    }
    return FpcaModel(mean, lam, phi, sigma2, min(fve, 1.0), provenance)
