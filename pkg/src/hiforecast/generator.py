"""Random full-lifespan curves drawn from a fitted prior."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curves import GridFunction, write_grid_functions

DEFAULT_W = 1000


def curve_rng(master_seed, index):
    """Generator for scenario ``index``; independent of how many others are drawn."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


@dataclass(frozen=True)
class ScenarioSet:
    """``W`` candidate curves on the model grid and the scores that built them."""

    grid: np.ndarray
    curves: np.ndarray  # (W, G)
    scores: np.ndarray  # (W, P)
    master_seed: int
    model_ref: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("grid", "curves", "scores"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.curves.ndim != 2 or self.curves.shape[1] != self.grid.size:
            raise ValueError("curves must be (W, G) on the grid")
        if self.curves.shape[0] < 1:
            raise ValueError("a scenario set needs at least one curve")

    def __len__(self):
        return self.curves.shape[0]

    def curve(self, i):
        return GridFunction(self.grid, self.curves[i])

    def write_curves_csv(self, path):
        write_grid_functions(((i, self.curve(i)) for i in range(len(self))), path, "scenario_id")

    def write_scores_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario_id", "r", "xi"])
            for i, row in enumerate(self.scores):
                for r, xi in enumerate(row, start=1):
                    w.writerow([i, r, repr(float(xi))])


def reconstruct(model, scores):
    """Mean plus score-weighted eigenfunctions, one row per score vector."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    out = np.broadcast_to(model.mean.values, (scores.shape[0], model.grid.size)).copy()
    # Elementwise accumulation: a matrix product's blocking depends on the
    # row count, which would make curve i depend on how many are drawn.
    for r in range(model.n_components):
        out += scores[:, r : r + 1] * model.eigenfunctions[r]
    return out


def draw_scores(model, w, master_seed):
    """``(w, P)`` scores; row ``i`` comes only from ``(master_seed, i)``."""
    P = model.n_components
    sd = np.sqrt(model.eigenvalues)
    scores = np.empty((w, P))
    for i in range(w):
        scores[i] = curve_rng(master_seed, i).standard_normal(P) * sd
    return scores


def generate(model, w=DEFAULT_W, master_seed=0):
    """Draw ``w`` curves ``mean + sum_r xi_r phi_r`` with ``xi_r ~ N(0, lambda_r)``.

    No measurement noise is added: candidates represent the smooth underlying
    curve.
    """
    if w < 1:
        raise ValueError("w must be at least 1")
    scores = draw_scores(model, w, master_seed)
    curves = reconstruct(model, scores)
    ref = {"n_components": model.n_components, "M": model.M, "grid_size": model.grid.size}
    return ScenarioSet(model.grid, curves, scores, int(master_seed), ref)


def project(model, curves):
    """Scores recovered from curves by trapezoid inner products with each eigenfunction."""
    from .curves import trapezoid_weights

    w = trapezoid_weights(model.grid)
    centred = np.atleast_2d(curves) - model.mean.values
    return (centred * w) @ model.eigenfunctions.T
