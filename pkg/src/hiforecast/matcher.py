"""Scenario matching: score candidates against a partial observation."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .curves import GridFunction, interpolation_weights
from .errors import DataError, DomainError

METHODS = ("proposed", "nn", "nn-s", "rg-linear", "gp-posterior")


@dataclass(frozen=True)
class Forecast:
    curve: GridFunction
    matching_score: float
    observed_horizon: float
    method: str = "proposed"
    selected_index: Optional[int] = None
    unit_id: Optional[str] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.matching_score >= 0:
            raise ValueError("matching score must be non-negative")

    def sidecar(self):
        d = {
            "unit_id": self.unit_id,
            "method": self.method,
            "matching_score": float(self.matching_score),
            "selected_index": "n/a" if self.selected_index is None else int(self.selected_index),
            "observed_horizon": float(self.observed_horizon),
        }
        for k, v in self.extras.items():
            if k != "source":
                d[k] = v
        return d

    def save(self, csv_path):
        """Write ``time,value`` CSV plus a JSON sidecar next to it."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "value"])
            for t, v in zip(self.curve.grid, self.curve.values):
                w.writerow([repr(float(t)), repr(float(v))])
        csv_path.with_suffix(".json").write_text(
            json.dumps(self.sidecar(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, csv_path):
        csv_path = Path(csv_path)
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        meta = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
        idx = meta.get("selected_index")
        known = {"unit_id", "method", "matching_score", "selected_index", "observed_horizon"}
        return cls(
            curve=GridFunction(data[:, 0], data[:, 1]),
            matching_score=meta["matching_score"],
            observed_horizon=meta["observed_horizon"],
            method=meta["method"],
            selected_index=None if idx == "n/a" else idx,
            unit_id=meta.get("unit_id"),
            extras={k: v for k, v in meta.items() if k not in known},
        )


def _check_obs(obs, grid):
    if len(obs) == 0:
        raise DataError("observation is empty")
    M = grid[-1]
    if obs.times[-1] > M * (1 + 1e-12) or obs.times[0] < grid[0]:
        raise DomainError(
            f"unit {obs.unit_id}: observation times must lie in [0, {M:g}] "
            f"(last is {obs.times[-1]:g})"
        )


def batch_scores(curves, grid, obs):
    """RMSE of every row of ``curves`` against ``obs``.

    Every candidate goes through the same elementwise arithmetic, so a single
    candidate scored alone gets bit-identical results.
    """
    _check_obs(obs, grid)
    i, frac = interpolation_weights(grid, obs.times)
    curves = np.atleast_2d(curves)
    at_obs = curves[:, i] * (1.0 - frac) + curves[:, i + 1] * frac
    diff = at_obs - obs.values
    # Column-by-column sum keeps each row's rounding independent of the batch.
    acc = np.zeros(curves.shape[0])
    for j in range(diff.shape[1]):
        acc += diff[:, j] * diff[:, j]
    return np.sqrt(acc / diff.shape[1])


def matching_score(candidate, obs):
    """Root-mean-square gap between a candidate and the observed values."""
    return float(batch_scores(candidate.values[None, :], candidate.grid, obs)[0])


def rank_candidates(scenarios, obs, k=1):
    """Indices and scores of the ``k`` best candidates (lowest index wins ties)."""
    H = batch_scores(scenarios.curves, scenarios.grid, obs)
    order = np.argsort(H, kind="stable")[:k]
    return order, H[order]


def select_forecast(scenarios, obs, top_k=1):
    """Pick the candidate with the smallest matching score."""
    order, H = rank_candidates(scenarios, obs, max(1, top_k))
    sel = int(order[0])
    extras = {}
    if top_k > 1:
        extras["top_k"] = [[int(i), float(h)] for i, h in zip(order, H)]
    return Forecast(
        curve=scenarios.curve(sel),
        matching_score=float(H[0]),
        observed_horizon=obs.last_time,
        method="proposed",
        selected_index=sel,
        unit_id=obs.unit_id,
        extras=extras,
    )
