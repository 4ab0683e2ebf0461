"""Command-line entry point: ``edgescale <subcommand> [options]``.

Subcommands: simulate-load, train, forecast, evaluate, adapt, autoscale-sim.
All randomness flows from ``--seed``; all outputs land under ``--out``.
``--config`` names a JSON file whose keys mirror the long option names
(dashes or underscores); explicit flags override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import arima as arima_mod
from . import autoscaler as asc
from . import forecasters as fc
from . import metrics as mt
from . import series as ser
from . import transfer as tl
from .dsp import DataflowGraph, Simulator

log = logging.getLogger("edgescale")


class UsageError(Exception):
    pass


def derive_seed(seed: int, component: str) -> int:
    """Independent per-component seed, stable under adding new components."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(component.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _rates(text) -> list:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad rate list {text!r}")
    if not vals or any(v <= 0 for v in vals):
        raise UsageError(f"sampling rates must be positive, got {text!r}")
    return vals


def _list(text) -> list:
    if isinstance(text, (list, tuple)):
        return list(text)
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _forecast_config(opt, seed: int) -> fc.ForecastConfig:
    return fc.ForecastConfig(seq_len=opt("seq_len"), epochs=opt("epochs"), batch_size=opt("batch_size"),
                             lr=opt("lr"), dropout=opt("dropout"), hidden=opt("hidden"),
                             layers=opt("layers"), seed=seed)


def _load_series(path) -> ser.TimeSeries:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return ser.load_series(p)


# --------------------------------------------------------------------------
# commands

def cmd_simulate_load(opt, out: Path, seed: int) -> list:
    rates = _rates(opt("rates"))
    bases = [(Path(p).stem, _load_series(p)) for p in _list(opt("base") or [])]
    if not bases and not opt("events"):
        bases = [("iot", ser.synthetic_base())]
    logs = []
    for p in _list(opt("events") or []):
        if not Path(p).exists():
            raise UsageError(f"no such file: {p}")
        logs.append((Path(p).stem, ser.ingest_event_log(p)))
    written = []
    for rate in rates:
        stats = None
        for name, base in bases:
            cfg = ser.SimConfig(rate, opt("noise"), opt("alpha_base"), derive_seed(seed, f"sim:{name}:{rate:g}"))
            s = ser.simulate_iot_load(base, cfg)
            path = out / f"{name}_{rate:g}s.csv"
            ser.save_series(s, path)
            written.append(path)
            if stats is None:
                stats = ser.TargetStats(float(s.values.mean()), float(s.values.std()))
        if opt("target_mean") is not None:
            stats = ser.TargetStats(opt("target_mean"), opt("target_std") or 0.0)
        for name, ev in logs:
            s = ser.count_per_window(ev, rate)
            if stats is not None:
                s = ser.match_statistics(s, stats)
            path = out / f"{name}_{rate:g}s.csv"
            ser.save_series(s, path)
            written.append(path)
    return written


def cmd_train(opt, out: Path, seed: int) -> list:
    data = _load_series(opt("data"))
    kind = opt("model")
    if kind not in fc.MODEL_CLASSES:
        raise UsageError(f"unknown model {kind!r}; choose from {sorted(fc.MODEL_CLASSES)}")
    cfg = _forecast_config(opt, derive_seed(seed, f"train:{kind}"))
    train = data if opt("train_fraction") >= 1 else ser.train_test_split(data, opt("train_fraction"))[0]
    model, report = fc.train_model(kind, train, cfg)
    ckpt = out / f"{kind}.npz"
    fc.save_model(ckpt, model)
    log_path = out / f"{kind}_train_log.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse"])
        for e, loss in enumerate(report.losses):
            w.writerow([e, repr(loss)])
    (out / f"{kind}_config.json").write_text(json.dumps(model.to_meta(), indent=2, sort_keys=True) + "\n")
    log.info("trained %s in %.2fs, mse %.4g -> %.4g", kind, report.delta_t, report.initial_loss, report.final_loss)
    return [ckpt, log_path]


def cmd_forecast(opt, out: Path, seed: int) -> list:
    model = fc.load_model(opt("checkpoint"))
    data = _load_series(opt("data"))
    L = model.cfg.seq_len
    if len(data) <= L:
        raise UsageError(f"series needs more than {L} points")
    preds = fc.walk_forward(model, data.values[:L], data.values[L:])
    future = fc.forecast_recursive(model, model.scaler.transform(data.values[-L:]), opt("horizon"))
    path = out / "predictions.csv"
    ts = data.timestamps
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "actual", "predicted"])
        for t, a, p in zip(ts[L:], data.values[L:], preds):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(p))])
        for h, p in enumerate(future, start=1):
            w.writerow([repr(float(ts[-1] + h * data.sampling_rate)), "", repr(float(p))])
    return [path]


def run_cell(name: str, series: ser.TimeSeries, model: str, cfg: fc.ForecastConfig,
             train_fraction: float = 0.8, arima_window: int = 24) -> mt.EvalReport:
    """Train on the chronological head of ``series`` and score one-step predictions on the tail."""
    train, test = ser.train_test_split(series, train_fraction)
    if model in fc.MODEL_CLASSES:
        def go():
            m, _ = fc.train_model(model, train, cfg)
            return fc.walk_forward(m, train.values, test.values)
    elif model == "arima":
        def go():
            m = arima_mod.arima_fit(train)
            return arima_mod.arima_forecast_rolling(m, test, arima_window)
    elif model == "persistence":
        def go():
            return fc.persistence_forecast(train.values, test.values)
    else:
        raise UsageError(f"unknown model {model!r}")
    preds, dt = mt.timed(go)
    a = test.values
    return mt.EvalReport(dataset=name, rate=series.sampling_rate, model=model, smape=mt.smape(a, preds),
                         rmse=mt.rmse(a, preds), rmse_norm=float("nan"), delta_t=dt, n=a.size,
                         mae=mt.mae(a, preds))


def cmd_evaluate(opt, out: Path, seed: int) -> list:
    models = _list(opt("models"))
    known = set(fc.MODEL_CLASSES) | {"arima", "persistence"}
    for m in models:
        if m not in known:
            raise UsageError(f"unknown model {m!r}; choose from {sorted(known)}")
    datasets = [(Path(p).stem, _load_series(p)) for p in _list(opt("data"))]
    if not datasets:
        raise UsageError("no datasets given")
    reports = []
    for name, s in datasets:
        for m in models:
            cfg = _forecast_config(opt, derive_seed(seed, f"eval:{name}:{m}"))
            reports.append(run_cell(name, s, m, cfg, opt("train_fraction"), opt("arima_window")))
            log.info("%s/%s smape %.3f%%", name, m, reports[-1].smape)
    mt.normalize_reports(reports)
    path = out / "report.csv"
    mt.write_reports(reports, path)
    return [path]


def cmd_adapt(opt, out: Path, seed: int) -> list:
    model = fc.load_model(opt("checkpoint"))
    if not isinstance(model, fc.GRUForecaster):
        raise UsageError("adaptation needs a GRU checkpoint")
    target = _load_series(opt("target"))
    sources = {Path(p).stem: _load_series(p) for p in _list(opt("source"))}
    if not sources:
        raise UsageError("no source series given")
    cfg = tl.AdaptConfig(dtw_threshold=opt("dtw_threshold"), lambda1=opt("lambda1"), lambda2=opt("lambda2"),
                         kernel_bandwidth=opt("bandwidth"), adapt_epochs=opt("adapt_epochs"),
                         cmmd_bins=opt("cmmd_bins"), lr=opt("adapt_lr"), seed=seed)
    prelim, _ = tl.preliminary_split(target.values, cfg.prelim_fraction)
    if prelim.size <= model.cfg.seq_len:
        raise UsageError("preliminary target collection is shorter than one window")
    norm = model.scaler.transform
    accepted = tl.select_sources({k: norm(s.values) for k, s in sources.items()}, norm(prelim),
                                 cfg.dtw_threshold)
    sel_path = out / "selected_sources.csv"
    with open(sel_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "dtw"])
        for m in accepted:
            w.writerow([m.key, repr(m.distance)])
    if not accepted:
        raise UsageError("no source series within the DTW threshold")
    Xs, ys = zip(*(tl.domain_windows(sources[m.key].values, model) for m in accepted))
    src = (np.vstack(Xs), np.concatenate(ys))
    tgt = tl.domain_windows(prelim, model)
    extractor = tl.FeatureExtractor.init(seed=derive_seed(seed, "adapt:extractor"))
    mode = opt("mode")
    if mode not in ("joint", "fine-tune"):
        raise UsageError(f"unknown adapt mode {mode!r}; choose joint or fine-tune")
    run = tl.joint_adapt if mode == "joint" else tl.fine_tune
    adapted, trace = run(model, extractor, src, tgt, cfg)
    ckpt = out / "adapted.npz"
    from .nn import save_checkpoint
    save_checkpoint(ckpt, adapted.params, adapted.to_meta())
    trace_path = out / "trace.csv"
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "task_loss", "mmd_loss", "cmmd_loss"])
        for r in trace.rows:
            w.writerow([r["epoch"], repr(r["task_loss"]), repr(r["mmd_loss"]), repr(r["cmmd_loss"])])
    return [ckpt, trace_path, sel_path]


def _scenario_load(name: str, n: int) -> np.ndarray:
    if name == "ramp":
        return asc.ramp_load(n, 100.0, 2000.0, hold=n // 10)
    if name == "step":
        return asc.step_load(n, 200.0, 600.0, n // 3)
    raise UsageError(f"unknown scenario {name!r}")


def cmd_autoscale_sim(opt, out: Path, seed: int) -> list:
    graph = DataflowGraph.load(opt("graph")) if opt("graph") else asc.demo_graph()
    if opt("load"):
        load = _load_series(opt("load")).values
    else:
        load = _scenario_load(opt("scenario"), opt("ticks"))
    kind = opt("forecaster")
    if kind == "oracle":
        forecaster = asc.OracleForecaster(load)
    elif kind == "last-value":
        forecaster = lambda hist, steps: np.full(steps, hist[-1])  # noqa: E731
    else:
        forecaster = asc.ModelForecaster(fc.load_model(kind))
    profile = asc.LatencyProfile(opt("edge_latency"), opt("migration_latency"), opt("cloud_latency"))
    cfg = asc.LoopConfig(control_interval=opt("interval"), pause_ticks=opt("pause_ticks"),
                         scaling_enabled=not opt("no_scaling"), profile=profile)
    sim = Simulator(graph)
    episode = asc.run_loop(sim, forecaster, load, cfg)
    ep_path, sum_path, store_path = out / "episode.csv", out / "summary.json", out / "metrics_store.csv"
    episode.write_csv(ep_path, graph.order)
    episode.write_summary(sum_path)
    episode.store.to_csv(store_path)
    return [ep_path, sum_path, store_path]


COMMANDS = {
    "simulate-load": cmd_simulate_load,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "adapt": cmd_adapt,
    "autoscale-sim": cmd_autoscale_sim,
}

# defaults live here so --config values can sit between them and explicit flags
DEFAULTS = {
    "rates": "60,120,300", "noise": 0.10, "alpha_base": 1.0, "target_mean": None, "target_std": None,
    "base": None, "events": None,
    "model": "gru", "seq_len": 24, "epochs": 10, "batch_size": 16, "lr": 0.01, "dropout": 0.2,
    "hidden": 64, "layers": 2, "train_fraction": 0.8,
    "horizon": 1, "models": "gru,cnn,arima", "arima_window": 24,
    "dtw_threshold": float("inf"), "lambda1": 1.0, "lambda2": 1.0, "bandwidth": None,
    "adapt_epochs": 5, "cmmd_bins": 4, "adapt_lr": 0.001, "mode": "joint",
    "graph": None, "load": None, "scenario": "ramp", "ticks": 200, "forecaster": "oracle",
    "interval": 1, "pause_ticks": 1, "no_scaling": False,
    "edge_latency": None, "migration_latency": 0.040, "cloud_latency": 0.050,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="JSON file of option defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    nn_opts = argparse.ArgumentParser(add_help=False)
    for flag, typ in (("--seq-len", int), ("--epochs", int), ("--batch-size", int), ("--lr", float),
                      ("--dropout", float), ("--hidden", int), ("--layers", int),
                      ("--train-fraction", float)):
        nn_opts.add_argument(flag, type=typ, default=None)

    p = argparse.ArgumentParser(prog="edgescale", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate-load", parents=[common], help="resample base loads and event logs")
    s.add_argument("--base", help="comma-separated base series CSVs (timestamp,value)")
    s.add_argument("--events", help="comma-separated event-log files")
    s.add_argument("--rates", help="comma-separated sampling rates in seconds")
    s.add_argument("--noise", type=float)
    s.add_argument("--alpha-base", type=float)
    s.add_argument("--target-mean", type=float)
    s.add_argument("--target-std", type=float)

    s = sub.add_parser("train", parents=[common, nn_opts], help="train a gru or cnn forecaster")
    s.add_argument("--data")
    s.add_argument("--model", help="gru or cnn")

    s = sub.add_parser("forecast", parents=[common], help="walk-forward and recursive predictions")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--horizon", type=int)

    s = sub.add_parser("evaluate", parents=[common, nn_opts], help="models x datasets accuracy grid")
    s.add_argument("--data", help="comma-separated series CSVs")
    s.add_argument("--models", help="comma-separated: gru,cnn,arima,persistence")
    s.add_argument("--arima-window", type=int)

    s = sub.add_parser("adapt", parents=[common], help="DTW source selection and joint adaptation")
    s.add_argument("--checkpoint")
    s.add_argument("--source", help="comma-separated source series CSVs")
    s.add_argument("--target")
    s.add_argument("--dtw-threshold", type=float)
    s.add_argument("--lambda1", type=float)
    s.add_argument("--lambda2", type=float)
    s.add_argument("--bandwidth", type=float)
    s.add_argument("--adapt-epochs", type=int)
    s.add_argument("--cmmd-bins", type=int)
    s.add_argument("--adapt-lr", type=float)
    s.add_argument("--mode", help="joint (task + MMD + CMMD) or fine-tune (task loss only)")

    s = sub.add_parser("autoscale-sim", parents=[common], help="run the MAPE-K loop over the simulator")
    s.add_argument("--graph", help="graph JSON file (default: source -> filter -> sink)")
    s.add_argument("--load", help="ingress series CSV (default: --scenario)")
    s.add_argument("--scenario", help="ramp or step")
    s.add_argument("--ticks", type=int)
    s.add_argument("--forecaster", help="oracle, last-value, or a model checkpoint path")
    s.add_argument("--interval", type=int, help="control interval in ticks")
    s.add_argument("--pause-ticks", type=int)
    s.add_argument("--no-scaling", action="store_true", default=None)
    s.add_argument("--edge-latency", type=float)
    s.add_argument("--migration-latency", type=float)
    s.add_argument("--cloud-latency", type=float)
    return p


REQUIRED = {
    "train": ("data",),
    "forecast": ("checkpoint", "data"),
    "evaluate": ("data",),
    "adapt": ("checkpoint", "source", "target"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {}
    if args.config:
        try:
            with open(args.config) as fh:
                config = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
    flags = vars(args)

    def opt(name):
        if flags.get(name) is not None:
            return flags[name]
        if name in config:
            return config[name]
        return DEFAULTS.get(name)

    for name in REQUIRED.get(args.command, ()):
        if opt(name) is None:
            parser.error(f"{args.command}: --{name.replace('_', '-')} is required")
    seed = opt("seed") if opt("seed") is not None else 0
    out = Path(opt("out") or "out")
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](opt, out, int(seed))
    except UsageError as exc:
        print(f"edgescale {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"edgescale {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
