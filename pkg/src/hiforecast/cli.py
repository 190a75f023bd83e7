"""Command-line pipeline: synth | prep | fit | forecast | rul | eval.

Every subcommand reads a JSON config and works inside its workspace::

    signals/<signal>/{train,test_obs,test_truth}.csv
    manifest.json, normalization.json, config.resolved.json
    models/<signal>.json
    forecasts/<signal>/<method>/unit_<id>.csv (+ .json sidecar)
    rul/<signal>_<method>.csv
    report/  (report.json, tables, residuals, figures/)
    run.log  (the only file with timestamps)
"""

import argparse
import csv
import fcntl
import json
import logging
import sys
import warnings
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod
from .curves import CurveSet, read_curves, write_curves
from .dataprep import (
    NormalizationMap,
    cosine_basis,
    make_truth,
    normalize_operating_conditions,
    orthonormalize,
    parse_fleet,
    select_degradation_signals,
    split_assignment,
    stratified_truncate,
    synth_fleet,
)
from .errors import ConfigError, DataError, HiForecastError, UsageError
from .evaluation import EvalConfig, EvalReport, Forecaster, predicted_rul, run_comparison
from .fpca import FpcaModel, fit as fit_fpca
from .matcher import METHODS, Forecast
from .rul import true_rul

log = logging.getLogger("hiforecast")


class WorkspaceBusy(HiForecastError):
    pass


# --- workspace helpers -----------------------------------------------------------


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path, what):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found at {path}; run the earlier pipeline step first")
    return json.loads(path.read_text(encoding="utf-8"))


@contextmanager
def _workspace(cfg):
    ws = Path(cfg.workspace)
    ws.mkdir(parents=True, exist_ok=True)
    lock = open(ws / ".lock", "w")
    try:
        try:
            fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            raise WorkspaceBusy(f"workspace {ws} is in use by another run") from exc
        handler = logging.FileHandler(ws / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger("hiforecast")
        root.addHandler(handler)
        try:
            _write_json(ws / "config.resolved.json", cfg.to_dict(include_paths=False))
            yield ws
        finally:
            root.removeHandler(handler)
            handler.close()
    finally:
        lock.close()


def _signals(cfg, ws):
    """Signal specs: the manifest's list, which prep/synth derived from the config."""
    manifest = _read_json(ws / "manifest.json", "manifest")
    return [config_mod.SignalSpec(s["name"], s.get("sensor"), s["sign"], s.get("theta")) for s in manifest["signals"]], manifest


def _pick_signals(specs, name):
    if name is None:
        return specs
    for s in specs:
        if s.name == name:
            return [s]
    raise ConfigError(f"unknown signal {name!r}; available: {', '.join(s.name for s in specs)}")


def _load_sets(ws, sig, manifest):
    d = ws / "signals" / sig
    M = manifest["M"]
    train = read_curves(d / "train.csv", M=M, complete=True)
    obs = read_curves(d / "test_obs.csv", M=manifest["test_M"])
    truth = read_curves(d / "test_truth.csv", M=manifest["test_M"], complete=True)
    return train, obs, truth


def _load_model(ws, sig):
    path = ws / "models" / f"{sig}.json"
    if not path.exists():
        raise UsageError(f"model for signal {sig!r} not found at {path}; run `hiforecast fit` first")
    return FpcaModel.load(path)


def _eval_config(cfg, spec, methods=None):
    return EvalConfig(
        theta=spec.oriented_theta,
        methods=tuple(methods or cfg.methods),
        w=cfg.w,
        master_seed=cfg.master_seed,
        fve_threshold=cfg.fve_threshold,
        smoother=cfg.smoother,
        sliding=cfg.sliding,
        censor_policy=cfg.censor_policy,
        rul_mse=cfg.rul_mse,
        per_unit_scenarios=cfg.per_unit_scenarios,
    )


def _write_split(ws, cfg, curves_by_signal, signal_rows, norm_map, extra=None):
    """Split, truncate and write every signal; all signals share one split."""
    first = next(iter(curves_by_signal.values()))
    assign = split_assignment(first, cfg.split)
    train_ids = [u for u, (role, _) in assign.items() if role == "train"]
    test_ids = [u for u, (role, _) in assign.items() if role == "test"]
    if not train_ids or not test_ids:
        raise DataError("split left the training or test set empty")
    M = max(first.by_id(u).last_time for u in train_ids)
    test_M = max(first.by_id(u).last_time for u in test_ids)
    units = {}
    for name, cs in curves_by_signal.items():
        train = cs.subset(train_ids, M=M)
        test = cs.subset(test_ids, M=test_M)
        obs, truth, ratios = stratified_truncate(test, cfg.truncation)
        d = ws / "signals" / name
        d.mkdir(parents=True, exist_ok=True)
        write_curves(train.curves, d / "train.csv")
        write_curves(obs.curves, d / "test_obs.csv")
        write_curves(truth.curves, d / "test_truth.csv")
        for u, (role, stratum) in assign.items():
            entry = units.setdefault(u, {"role": role, "stratum": int(stratum), "lifetime": first.by_id(u).last_time})
            if role == "test":
                entry["r"] = ratios[u]
                entry.setdefault("observed_count", {})[name] = len(obs.by_id(u))
    manifest = {
        "M": M,
        "test_M": test_M,
        "n_units": len(assign),
        "n_train": len(train_ids),
        "n_test": len(test_ids),
        "split": asdict(cfg.split),
        "truncation": {
            "seed": cfg.truncation.seed,
            "percentile_cut": cfg.truncation.percentile_cut,
            "low_range": list(cfg.truncation.low_range),
            "high_range": list(cfg.truncation.high_range),
        },
        "signals": signal_rows,
        "units": units,
    }
    if extra:
        manifest.update(extra)
    _write_json(ws / "manifest.json", manifest)
    _write_json(ws / "normalization.json", norm_map.to_dict())
    log.info("wrote %d signals, %d train / %d test units", len(curves_by_signal), len(train_ids), len(test_ids))
    return manifest


# --- subcommands -----------------------------------------------------------------


def cmd_prep(cfg, args):
    if cfg.source != "cmapss":
        raise ConfigError("prep reads a fleet table; use `synth` for a synthetic source")
    table = parse_fleet(cfg.train_file)
    life = table.to_curves(1)
    assign = split_assignment(life, cfg.split)
    train_units = [int(u) for u, (role, _) in assign.items() if role == "train"]
    if cfg.signals:
        specs = list(cfg.signals)
        for s in specs:
            if s.sensor is None:
                raise ConfigError(f"signal {s.name!r} needs a 'sensor' index for a fleet table")
        norm_sensors = [s.sensor for s in specs]
    else:
        specs = None
        norm_sensors = list(range(1, table.sensors.shape[1] + 1))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table, norm_map = normalize_operating_conditions(
            table, norm_sensors, cfg.normalization, fit_units=train_units
        )
    for w in caught:
        log.warning("%s", w.message)
        print(f"warning: {w.message}", file=sys.stderr)
    rows = []
    if specs is None:
        choices = select_degradation_signals(table.select_units(train_units), cfg.z_threshold)
        specs = [config_mod.SignalSpec(f"sensor_{c.sensor}", c.sensor, c.sign, None) for c in choices]
        zs = {c.sensor: c.z for c in choices}
        if not specs:
            raise DataError("no degradation signal selected; lower z_threshold or list signals in the config")
    else:
        zs = {}
    curves = {}
    for s in specs:
        curves[s.name] = table.to_curves(s.sensor, s.sign)
        rows.append({"name": s.name, "sensor": s.sensor, "sign": s.sign, "theta": s.theta, "z": zs.get(s.sensor)})
    manifest = _write_split(args.ws, cfg, curves, rows, norm_map, {"source": str(Path(cfg.train_file).name)})
    print(f"prepared {len(rows)} signal(s): {manifest['n_train']} train / {manifest['n_test']} test units")


def synthetic_truth(spec):
    grid_size = spec.grid_size
    P = len(spec.eigenvalues)

    def mean(t):
        return spec.mean_start - spec.mean_drop * (t / spec.M) ** spec.mean_power

    from .curves import make_grid

    grid = make_grid(spec.M, grid_size)
    if spec.basis == "cosine":
        basis = cosine_basis(grid, P)
    else:
        basis = orthonormalize(np.array([(grid / spec.M) ** k for k in range(P)]), grid)
    return make_truth(spec.M, mean, spec.eigenvalues, basis, spec.noise_sd, grid_size)


def cmd_synth(cfg, args):
    spec = cfg.synthetic
    truth = synthetic_truth(spec)
    points = spec.points if isinstance(spec.points, int) else tuple(spec.points)
    fleet, _ = synth_fleet(truth, spec.n_units, points, spec.seed, spec.failure_threshold)
    raw = args.ws / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    truth.save(raw / "truth_model.json")
    write_curves(fleet.curves, raw / "fleet.csv")
    if cfg.signals:
        s = cfg.signals[0]
        spec_row = {"name": s.name, "sensor": None, "sign": s.sign, "theta": s.theta, "z": None}
        fleet = CurveSet(
            tuple(type(c)(c.unit_id, c.times, s.sign * c.values) for c in fleet.curves), fleet.M, fleet.complete
        )
    else:
        spec_row = {"name": "hi", "sensor": None, "sign": 1.0, "theta": spec.failure_threshold, "z": None}
    manifest = _write_split(args.ws, cfg, {spec_row["name"]: fleet}, [spec_row], NormalizationMap("none", ()), {"source": "synthetic"})
    print(f"synthesized {spec.n_units} units: {manifest['n_train']} train / {manifest['n_test']} test")


def cmd_fit(cfg, args):
    specs, manifest = _signals(cfg, args.ws)
    for s in _pick_signals(specs, args.signal):
        train, _, _ = _load_sets(args.ws, s.name, manifest)
        model = fit_fpca(train, cfg.smoother, cfg.fve_threshold)
        if model.n_components == 0:
            msg = f"signal {s.name}: fitted model has no variance components (P = 0)"
            log.warning(msg)
            print(f"warning: {msg}", file=sys.stderr)
        path = args.ws / "models" / f"{s.name}.json"
        model.save(path)
        print(f"{s.name}: P={model.n_components} fve={model.fve:.4f} sigma2={model.noise_variance:.4g} -> {path}")


def _forecast_all(cfg, args, s, manifest, method, model, units=None):
    train, obs, _ = _load_sets(args.ws, s.name, manifest)
    engine = Forecaster(train, _eval_config(cfg, s, [method]), model)
    out_dir = args.ws / "forecasts" / s.name / method
    written, failed = [], []
    for k, o in enumerate(obs.curves):
        if units is not None and o.unit_id not in units:
            continue
        try:
            f = engine.forecast(method, o, k)
        except (DataError, HiForecastError) as exc:
            if isinstance(exc, UsageError):
                raise
            failed.append((o.unit_id, str(exc)))
            log.warning("%s/%s unit %s: %s", s.name, method, o.unit_id, exc)
            continue
        f.save(out_dir / f"unit_{o.unit_id}.csv")
        written.append(o.unit_id)
    return written, failed


def cmd_forecast(cfg, args):
    specs, manifest = _signals(cfg, args.ws)
    if args.unit is None and not args.all:
        raise UsageError("give --unit <id> or --all")
    method = args.method or "proposed"
    for s in _pick_signals(specs, args.signal):
        model = _load_model(args.ws, s.name)
        units = None if args.all else {str(args.unit)}
        if units is not None:
            _, obs, _ = _load_sets(args.ws, s.name, manifest)
            if str(args.unit) not in obs.unit_ids:
                raise UsageError(f"unit {args.unit} is not a test unit of signal {s.name}")
        written, failed = _forecast_all(cfg, args, s, manifest, method, model, units)
        print(f"{s.name}/{method}: {len(written)} forecast(s) written, {len(failed)} failed")
        for u, msg in failed:
            print(f"  unit {u}: {msg}", file=sys.stderr)
        if units is not None and failed:
            raise DataError(failed[0][1])


def cmd_rul(cfg, args):
    specs, manifest = _signals(cfg, args.ws)
    method = args.method or "proposed"
    for s in _pick_signals(specs, args.signal):
        if s.oriented_theta is None:
            raise ConfigError(f"signal {s.name} has no threshold 'theta' configured")
        theta = s.oriented_theta
        _, obs, truth = _load_sets(args.ws, s.name, manifest)
        fdir = args.ws / "forecasts" / s.name / method
        rows = [["unit_id", "method", "theta", "t_star", "rul_true", "rul_pred", "censored"]]
        missing = 0
        for o in obs.curves:
            path = fdir / f"unit_{o.unit_id}.csv"
            if not path.exists():
                missing += 1
                continue
            f = Forecast.load(path)
            rp = predicted_rul(f, theta)
            try:
                rt = true_rul(truth.by_id(o.unit_id), theta, o.last_time).value
                rt = repr(rt)
            except DataError:
                rt = "n/a"
            rows.append([o.unit_id, method, repr(theta), repr(o.last_time), rt, repr(rp.value), int(rp.censored)])
        if len(rows) == 1:
            raise UsageError(f"no forecasts under {fdir}; run `hiforecast forecast --all` first")
        out = args.ws / "rul" / f"{s.name}_{method}.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        print(f"{s.name}/{method}: {len(rows) - 1} RUL estimate(s) -> {out}" + (f" ({missing} missing)" if missing else ""))


def cmd_eval(cfg, args):
    specs, manifest = _signals(cfg, args.ws)
    methods = [args.method] if args.method else list(cfg.methods)
    report = EvalReport()
    sets = {}
    models = {}
    for s in _pick_signals(specs, args.signal):
        train, obs, truth = _load_sets(args.ws, s.name, manifest)
        path = args.ws / "models" / f"{s.name}.json"
        if path.exists():
            model = FpcaModel.load(path)
        else:
            model = fit_fpca(train, cfg.smoother, cfg.fve_threshold)
            model.save(path)
        ecfg = _eval_config(cfg, s, methods)
        report.merge(run_comparison(train, obs, truth, ecfg, signal=s.name, model=model))
        sets[s.name] = (train, obs, truth, ecfg)
        models[s.name] = model
    report.compute_improvements()
    report.provenance["config_hash"] = config_mod_hash(cfg)
    report.provenance["methods"] = methods
    out = report.write(args.ws / "report")
    if cfg.figures:
        _figures(report, sets, models, out / "figures")
    for r in report.results:
        ext = "n/a" if r.rmse_ext is None else f"{r.rmse_ext:.4g}"
        rul = "n/a" if r.rmse_rul is None else f"{r.rmse_rul:.4g}"
        print(f"{r.signal:>12} {r.method:>13}  rmse_ext={ext:>9}  rmse_rul={rul:>9}  censored={r.censored_count}  failed={r.n_failed}")
    for sig, imp in report.improvements.items():
        parts = []
        for metric, v in imp.items():
            if v and v.get("value") is not None:
                parts.append(f"{metric} {100 * v['value']:.2f}% vs {v['best_baseline']}")
        if parts:
            print(f"{sig:>12}  IMP: " + "; ".join(parts))
    print(f"report -> {out}")


def config_mod_hash(cfg):
    from .evaluation import config_hash

    return config_hash(cfg.to_dict(include_paths=False))


def _figures(report, sets, models, fig_dir, n_examples=3):
    from . import plotting

    fig_dir.mkdir(parents=True, exist_ok=True)
    plotting.metric_bars(report, "rmse_ext", fig_dir / "rmse_ext.png")
    if any(r.rmse_rul is not None for r in report.results):
        plotting.metric_bars(report, "rmse_rul", fig_dir / "rmse_rul.png")
    for sig, (train, obs, truth, ecfg) in sets.items():
        model = models[sig]
        plotting.model_summary(model, fig_dir / f"model_{sig}.png", train)
        engine = Forecaster(train, ecfg, model)
        for k, o in enumerate(obs.curves[:n_examples]):
            fcs = []
            for m in ecfg.methods:
                try:
                    fcs.append(engine.forecast(m, o, k))
                except HiForecastError:
                    continue
            plotting.forecast_panel(o, truth.by_id(o.unit_id), fcs, ecfg.theta, fig_dir / f"forecast_{sig}_unit_{o.unit_id}.png", f"{sig}, unit {o.unit_id}")
        if "proposed" in ecfg.methods and obs.curves:
            o = obs.curves[0]
            scen = engine.scenarios(0)
            from .matcher import select_forecast

            sel = select_forecast(scen, o).selected_index
            plotting.scenario_fan(scen, fig_dir / f"scenarios_{sig}.png", obs=o, selected=sel)


# --- entry point -----------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "rul": cmd_rul,
    "eval": cmd_eval,
}


def build_parser():
    p = argparse.ArgumentParser(prog="hiforecast", description="Health-indicator curve forecasting pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=list(COMMANDS), help="pipeline step")
    p.add_argument("--config", required=True, help="JSON pipeline config")
    p.add_argument("--signal", help="restrict to one signal (default: all)")
    p.add_argument("--method", choices=METHODS, help="forecasting method")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--w", type=int, help="override the number of generated scenarios")
    p.add_argument("--workspace", help="override the workspace directory")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--unit", help="forecast a single test unit")
    g.add_argument("--all", action="store_true", help="forecast every test unit")
    p.add_argument("--literal-eq15", dest="rul_mse", action="store_true", help="report RUL mean squared error without the square root")
    p.add_argument("--censor-policy", choices=("exclude", "cap"), help="handling of censored RUL predictions")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.getLogger("hiforecast").setLevel(logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.ERROR)
    logging.getLogger("hiforecast").addHandler(console)
    try:
        cfg = config_mod.load(args.config)
        over = {
            "master_seed": args.seed,
            "w": args.w,
            "workspace": None if args.workspace is None else Path(args.workspace),
            "rul_mse": True if args.rul_mse else None,
            "censor_policy": args.censor_policy,
        }
        try:
            cfg = config_mod.with_overrides(cfg, **over)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        with _workspace(cfg) as ws:
            args.ws = ws
            log.info("hiforecast %s %s", args.command, " ".join(sys.argv[1:]) if argv is None else " ".join(argv))
            COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except HiForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        logging.getLogger("hiforecast").removeHandler(console)
    return 0


if __name__ == "__main__":
    sys.exit(main())
