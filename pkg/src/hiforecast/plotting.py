"""Report figures. Uses the non-interactive Agg backend and writes PNG files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_COLORS = {
    "proposed": "#1f77b4",
    "nn": "#ff7f0e",
    "nn-s": "#2ca02c",
    "rg-linear": "#d62728",
    "gp-posterior": "#9467bd",
}

# Fixed metadata keeps PNG bytes identical between runs.
_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def metric_bars(report, metric, path):
    """Grouped bars: one group per signal, one bar per method."""
    sigs = report.signals
    methods = report.methods
    width = 0.8 / max(1, len(methods))
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(sigs), 3.2))
    x = np.arange(len(sigs))
    for k, m in enumerate(methods):
        vals = []
        for s in sigs:
            try:
                v = getattr(report.get(s, m), metric)
            except KeyError:
                v = None
            vals.append(np.nan if v is None else v)
        ax.bar(x + (k - (len(methods) - 1) / 2) * width, vals, width, label=m, color=METHOD_COLORS.get(m))
    ax.set_xticks(x)
    ax.set_xticklabels(sigs)
    ax.set_ylabel(metric.replace("_", " ").upper())
    ax.legend(fontsize=7, frameon=False, ncol=min(len(methods), 3))
    _style(ax)
    return _save(fig, path)


def forecast_panel(obs, truth, forecasts, theta, path, title=None):
    """Observed prefix, held-out truth, and each method's forecast for one unit."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(truth.times, truth.values, ".", color="0.6", ms=3, label="held out")
    ax.plot(obs.times, obs.values, ".", color="k", ms=3, label="observed")
    for f in forecasts:
        ax.plot(f.curve.grid, f.curve.values, lw=1.2, label=f.method, color=METHOD_COLORS.get(f.method))
    if theta is not None:
        ax.axhline(theta, color="k", lw=0.7, ls="--")
    ax.axvline(obs.last_time, color="k", lw=0.5, ls=":")
    ax.set_xlabel("time")
    ax.set_ylabel("health indicator")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=6, frameon=False)
    _style(ax)
    return _save(fig, path)


def scenario_fan(scenarios, path, n_show=50, obs=None, selected=None):
    """A sample of generated candidates, optionally with the matched one."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    n = min(n_show, len(scenarios))
    for i in range(n):
        ax.plot(scenarios.grid, scenarios.curves[i], color="0.75", lw=0.5)
    if selected is not None:
        ax.plot(scenarios.grid, scenarios.curves[selected], color=METHOD_COLORS["proposed"], lw=1.5, label="selected")
    if obs is not None:
        ax.plot(obs.times, obs.values, ".k", ms=3, label="observed")
        ax.legend(fontsize=7, frameon=False)
    ax.set_xlabel("time")
    ax.set_ylabel("health indicator")
    _style(ax)
    return _save(fig, path)


def model_summary(model, path, curves=None):
    """Mean with +-2 sd band and the leading eigenfunctions."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
    g = model.grid
    if curves is not None:
        for c in curves.curves[:30]:
            a1.plot(c.times, c.values, color="0.8", lw=0.5)
    sd = np.sqrt(np.maximum(np.diag(model.covariance().values), 0.0))
    a1.plot(g, model.mean.values, color="k", lw=1.5)
    a1.fill_between(g, model.mean.values - 2 * sd, model.mean.values + 2 * sd, alpha=0.2)
    a1.set_xlabel("time")
    a1.set_ylabel("mean")
    for r in range(min(model.n_components, 4)):
        a2.plot(g, model.eigenfunctions[r], lw=1.2, label=f"r={r + 1}, lambda={model.eigenvalues[r]:.3g}")
    a2.set_xlabel("time")
    a2.set_ylabel("eigenfunction")
    if model.n_components:
        a2.legend(fontsize=6, frameon=False)
    for ax in (a1, a2):
        _style(ax)
    return _save(fig, path)
