import numpy as np
import pytest
from hypothesis import settings

from hiforecast.curves import CurveSet, SampledCurve
from hiforecast.dataprep import RawFleetTable, make_truth

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

M10 = 10.0


def quad_mean(t, M=M10):
    return 1 - (np.asarray(t) / M) ** 2


def level_shape_truth(lam=(0.2, 0.05), noise_sd=0.1, M=M10, grid_size=101):
    """Known model: quadratic mean, a level component and a half-cosine shape component."""
    return make_truth(
        M,
        lambda t: quad_mean(t, M),
        lam,
        [lambda t: np.ones_like(t), lambda t: np.cos(np.pi * t / M)],
        noise_sd=noise_sd,
        grid_size=grid_size,
    )


def dense_set(values_fn, n, M=M10, points=51):
    t = np.linspace(0, M, points)
    curves = [SampledCurve(str(i), t, values_fn(i, t)) for i in range(n)]
    return CurveSet.from_curves(curves, M=M, complete=[True] * n)


def make_table(lifetimes, seed=0, settings_fn=None, sensor_fn=None):
    """Fleet with flat noisy sensors; sensor 4 falls and sensor 11 rises toward failure."""
    rng = np.random.default_rng(seed)
    U, C, S, X = [], [], [], []
    for u, life in enumerate(lifetimes, start=1):
        cyc = np.arange(1, life + 1)
        frac = cyc / life
        sens = rng.normal(0, 0.1, (life, 21)) + np.arange(21)
        sens[:, 3] -= 2 * frac**2
        sens[:, 10] += 3 * frac**2
        sens[:, 6] = 5.0
        sett = np.zeros((life, 3)) if settings_fn is None else settings_fn(rng, life)
        if sensor_fn is not None:
            sens = sensor_fn(sens, sett, frac)
        U += [u] * life
        C += list(cyc)
        S.append(sett)
        X.append(sens)
    return RawFleetTable(U, C, np.vstack(S), np.vstack(X))


def write_table(table, path):
    with open(path, "w") as fh:
        for k in range(len(table)):
            vals = [table.unit[k], table.cycle[k], *table.settings[k], *table.sensors[k]]
            fh.write(" ".join(f"{v:.6g}" for v in vals) + " \n")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary ----------------------------------------------------------------

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        for key, line in report.user_properties:
            if key == "acceptance":
                _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def accept(request):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number, name, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2} {name}: {status} ({detail})"
        print(line)
        request.node.user_properties.append(("acceptance", line))
        return ok

    return record
