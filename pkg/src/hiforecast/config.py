"""Pipeline configuration read from JSON."""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .baselines import SlidingWindowConfig
from .dataprep import SplitSpec, TruncationSpec
from .errors import ConfigError, ParseError
from .evaluation import CENSOR_POLICIES
from .generator import DEFAULT_W
from .matcher import METHODS
from .smoothing import SmootherConfig


@dataclass(frozen=True)
class SignalSpec:
    """One health-indicator signal.

    ``theta`` is given on the raw sensor scale; ``oriented_theta`` applies the
    orientation sign so it lives on the same scale as the stored curves.
    """

    name: str
    sensor: Optional[int] = None
    sign: float = 1.0
    theta: Optional[float] = None

    @property
    def oriented_theta(self):
        return None if self.theta is None else self.sign * self.theta


@dataclass(frozen=True)
class SynthSpec:
    M: float = 100.0
    n_units: int = 100
    points: object = (10, 20)
    mean_start: float = 1.0
    mean_drop: float = 1.0
    mean_power: float = 2.0
    eigenvalues: tuple = (0.04, 0.01)
    basis: str = "cosine"
    noise_sd: float = 0.05
    failure_threshold: Optional[float] = 0.2
    grid_size: int = 101
    seed: int = 0

    def __post_init__(self):
        if self.basis not in ("cosine", "polynomial"):
            raise ConfigError("synthetic basis must be 'cosine' or 'polynomial'")
        if isinstance(self.points, list):
            object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "eigenvalues", tuple(float(x) for x in self.eigenvalues))


@dataclass(frozen=True)
class PipelineConfig:
    workspace: Path
    source: str = "cmapss"  # or "synthetic"
    train_file: Optional[Path] = None
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    signals: tuple = ()  # empty means: select automatically
    z_threshold: float = 2.0
    normalization: str = "none"
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    fve_threshold: float = 0.95
    w: int = DEFAULT_W
    master_seed: int = 0
    split: SplitSpec = field(default_factory=SplitSpec)
    truncation: TruncationSpec = field(default_factory=TruncationSpec)
    sliding: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)
    methods: tuple = METHODS
    censor_policy: str = "exclude"
    rul_mse: bool = False
    per_unit_scenarios: bool = False
    figures: bool = True

    def __post_init__(self):
        if self.source not in ("cmapss", "synthetic"):
            raise ConfigError(f"source must be 'cmapss' or 'synthetic', got {self.source!r}")
        if self.source == "cmapss" and self.train_file is None:
            raise ConfigError("cmapss source needs 'train_file'")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; valid: {', '.join(METHODS)}")
        if self.censor_policy not in CENSOR_POLICIES:
            raise ConfigError(f"censor_policy must be one of {CENSOR_POLICIES}")
        if self.normalization not in ("none", "ols", "cluster"):
            raise ConfigError("normalization must be 'none', 'ols' or 'cluster'")
        if self.w < 1:
            raise ConfigError("w must be at least 1")
        if not 0 < self.fve_threshold <= 1:
            raise ConfigError("fve_threshold must lie in (0, 1]")

    def signal(self, name):
        for s in self.signals:
            if s.name == name:
                return s
        raise ConfigError(f"unknown signal {name!r}; configured: {', '.join(s.name for s in self.signals)}")

    def to_dict(self, include_paths=True):
        """JSON-ready form. ``include_paths=False`` leaves out local paths."""
        d = {
            "source": self.source,
            "synthetic": asdict(self.synthetic),
            "signals": [asdict(s) for s in self.signals],
            "z_threshold": self.z_threshold,
            "normalization": self.normalization,
            "smoother": self.smoother.to_dict(),
            "fve_threshold": self.fve_threshold,
            "w": self.w,
            "master_seed": self.master_seed,
            "split": asdict(self.split),
            "truncation": asdict(self.truncation),
            "sliding": asdict(self.sliding),
            "methods": list(self.methods),
            "censor_policy": self.censor_policy,
            "rul_mse": self.rul_mse,
            "per_unit_scenarios": self.per_unit_scenarios,
            "figures": self.figures,
        }
        d["synthetic"]["points"] = list(d["synthetic"]["points"]) if isinstance(d["synthetic"]["points"], tuple) else d["synthetic"]["points"]
        d["truncation"]["low_range"] = list(self.truncation.low_range)
        d["truncation"]["high_range"] = list(self.truncation.high_range)
        if include_paths:
            d["workspace"] = str(self.workspace)
            d["train_file"] = None if self.train_file is None else str(self.train_file)
        return d


def _build(cls, d, what):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"'{what}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{what}': {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{what}': {exc}") from exc


def _signals(raw):
    out = []
    for k, s in enumerate(raw or []):
        if not isinstance(s, dict) or "name" not in s:
            raise ConfigError(f"signals[{k}] must be an object with a 'name'")
        out.append(_build(SignalSpec, s, f"signals[{k}]"))
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise ConfigError("signal names must be unique")
    return tuple(out)


def from_dict(d, base_dir="."):
    """Build a config; relative paths are resolved against ``base_dir``."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    base = Path(base_dir)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if "workspace" not in d:
        raise ConfigError("config needs a 'workspace' path")
    kw = dict(d)
    kw["workspace"] = base / d["workspace"]
    if d.get("train_file") is not None:
        kw["train_file"] = base / d["train_file"]
    kw["synthetic"] = _build(SynthSpec, d.get("synthetic"), "synthetic")
    kw["signals"] = _signals(d.get("signals"))
    if "smoother" in d:
        try:
            kw["smoother"] = SmootherConfig.from_dict(d["smoother"])
        except (TypeError, AttributeError) as exc:
            raise ConfigError(f"invalid 'smoother': {exc}") from exc
    kw["split"] = _build(SplitSpec, d.get("split"), "split")
    kw["truncation"] = _build(TruncationSpec, d.get("truncation"), "truncation")
    kw["sliding"] = _build(SlidingWindowConfig, d.get("sliding"), "sliding")
    if "methods" in d:
        kw["methods"] = tuple(d["methods"])
    try:
        return PipelineConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror or exc}", path) from exc
    except ValueError as exc:
        raise ParseError(f"config is not valid JSON: {exc}", path) from exc
    return from_dict(d, path.parent)


def with_overrides(cfg, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw) if kw else cfg
