import csv
import hashlib
import json

import numpy as np
import pytest

from edgescale import cli
from edgescale.series import TimeSeries, load_series, save_series, synthetic_base


@pytest.fixture
def workdir(tmp_path):
    rng = np.random.default_rng(0)
    stamps = np.sort(rng.uniform(0, 180_000, 30_000)).astype(int)
    (tmp_path / "taxi.csv").write_text("pickup\n" + "\n".join(map(str, stamps)) + "\n")
    save_series(synthetic_base(n=300), tmp_path / "iot.csv")
    return tmp_path


def run(*args):
    return cli.main([str(a) for a in args])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_derive_seed_independent():
    a = cli.derive_seed(42, "train:gru")
    assert a == cli.derive_seed(42, "train:gru")
    assert a != cli.derive_seed(42, "train:cnn") and a != cli.derive_seed(43, "train:gru")


def test_simulate_load_grid_and_determinism(workdir):
    args = ("simulate-load", "--base", workdir / "iot.csv", "--events", workdir / "taxi.csv",
            "--rates", "60,120,300", "--seed", 42)
    assert run(*args, "--out", workdir / "a") == 0
    assert run(*args, "--out", workdir / "b") == 0
    files = sorted(p.name for p in (workdir / "a").glob("*.csv"))
    assert len(files) == 6
    for name in files:
        assert digest(workdir / "a" / name) == digest(workdir / "b" / name)
    iot = load_series(workdir / "a" / "iot_60s.csv").values
    taxi = load_series(workdir / "a" / "taxi_60s.csv").values
    assert taxi.mean() == pytest.approx(iot.mean()) and taxi.std() == pytest.approx(iot.std())


def test_simulate_load_usage_errors(workdir, capsys):
    assert run("simulate-load", "--rates", "0", "--out", workdir / "x") != 0
    assert run("simulate-load", "--rates", "abc", "--out", workdir / "x") != 0
    assert run("simulate-load", "--base", workdir / "missing.csv", "--out", workdir / "x") != 0
    assert "error" in capsys.readouterr().err


def test_missing_required_flag():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code != 0


def test_train_defaults_and_forecast(workdir):
    before = digest(workdir / "iot.csv")
    assert run("train", "--data", workdir / "iot.csv", "--out", workdir / "t", "--seed", 1) == 0
    meta = json.loads((workdir / "t" / "gru_config.json").read_text())["config"]
    assert (meta["seq_len"], meta["layers"], meta["hidden"], meta["dropout"], meta["lr"],
            meta["batch_size"], meta["epochs"]) == (24, 2, 64, 0.2, 0.01, 16, 10)
    log = read_csv(workdir / "t" / "gru_train_log.csv")
    assert len(log) == 11 and float(log[-1]["train_mse"]) < float(log[0]["train_mse"])

    assert run("forecast", "--checkpoint", workdir / "t" / "gru.npz", "--data", workdir / "iot.csv",
               "--horizon", 3, "--out", workdir / "f") == 0
    rows = read_csv(workdir / "f" / "predictions.csv")
    assert list(rows[0]) == ["timestamp", "actual", "predicted"]
    assert len(rows) == 300 - 24 + 3 and rows[-1]["actual"] == ""
    assert digest(workdir / "iot.csv") == before


def test_config_file_with_flag_override(workdir):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "hidden": 4, "model": "cnn", "seq-len": 12}))
    assert run("train", "--data", workdir / "iot.csv", "--config", cfg, "--model", "gru",
               "--out", workdir / "c") == 0
    meta = json.loads((workdir / "c" / "gru_config.json").read_text())["config"]
    assert (meta["epochs"], meta["hidden"], meta["seq_len"]) == (1, 4, 12)


def test_evaluate_grid(workdir):
    assert run("simulate-load", "--base", workdir / "iot.csv", "--events", workdir / "taxi.csv",
               "--out", workdir / "d") == 0
    data = ",".join(str(p) for p in sorted((workdir / "d").glob("*.csv")))
    args = ("evaluate", "--data", data, "--epochs", 1, "--hidden", 8, "--layers", 1, "--seed", 42)
    assert run(*args, "--out", workdir / "e1") == 0
    rows = read_csv(workdir / "e1" / "report.csv")
    assert len(rows) == 18
    assert [r["model"] for r in rows[:3]] == ["gru", "cnn", "arima"]
    assert len({r["dataset"] for r in rows}) == 6
    assert run(*args, "--out", workdir / "e2") == 0
    again = read_csv(workdir / "e2" / "report.csv")
    strip = [{k: v for k, v in r.items() if k != "delta_t"} for r in rows]
    assert strip == [{k: v for k, v in r.items() if k != "delta_t"} for r in again]


def test_evaluate_constant_dataset(workdir):
    save_series(TimeSeries(0, 60, np.full(200, 250.0)), workdir / "flat.csv")
    assert run("evaluate", "--data", workdir / "flat.csv", "--out", workdir / "e") == 0
    rows = read_csv(workdir / "e" / "report.csv")
    assert len(rows) == 3 and all(float(r["smape"]) < 1.0 for r in rows)


def test_evaluate_unknown_model(workdir):
    assert run("evaluate", "--data", workdir / "iot.csv", "--models", "prophet", "--out", workdir / "e") != 0


def test_adapt_zero_weights_equals_fine_tune(workdir):
    src = synthetic_base(n=300)
    save_series(src.with_values(src.values + 150), workdir / "target.csv")
    assert run("train", "--data", workdir / "iot.csv", "--epochs", 1, "--hidden", 8, "--layers", 1,
               "--out", workdir / "t") == 0
    common = ("adapt", "--checkpoint", workdir / "t" / "gru.npz", "--source", workdir / "iot.csv",
              "--target", workdir / "target.csv", "--adapt-epochs", 2, "--seed", 42)
    assert run(*common, "--lambda1", 0, "--lambda2", 0, "--out", workdir / "j") == 0
    assert run(*common, "--mode", "fine-tune", "--out", workdir / "f") == 0
    j = read_csv(workdir / "j" / "trace.csv")
    f = read_csv(workdir / "f" / "trace.csv")
    assert [r["task_loss"] for r in j] == [r["task_loss"] for r in f]
    assert list(j[0]) == ["epoch", "task_loss", "mmd_loss", "cmmd_loss"] and len(j) == 3


def test_adapt_threshold_rejects_all(workdir):
    assert run("train", "--data", workdir / "iot.csv", "--epochs", 1, "--hidden", 4, "--layers", 1,
               "--out", workdir / "t") == 0
    assert run("adapt", "--checkpoint", workdir / "t" / "gru.npz", "--source", workdir / "iot.csv",
               "--target", workdir / "iot.csv", "--dtw-threshold", 0, "--out", workdir / "a") != 0


def test_autoscale_sim_bundled_ramp(workdir):
    assert run("autoscale-sim", "--out", workdir / "s") == 0
    header = (workdir / "s" / "episode.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["tick", "ingress", "forecast"]
    assert {"eta_filter", "queue_filter", "latency", "backpressure", "actions"} <= set(header)
    summary = json.loads((workdir / "s" / "summary.json").read_text())
    assert {"max_queue", "action_count", "migrations"} <= set(summary)
    assert run("autoscale-sim", "--no-scaling", "--out", workdir / "n") == 0
    off = json.loads((workdir / "n" / "summary.json").read_text())
    assert off["max_queue"] > summary["max_queue"] and off["action_count"] == 0


def test_autoscale_sim_with_graph_and_model(workdir):
    from edgescale.autoscaler import demo_graph, ramp_load
    demo_graph().save(workdir / "g.json")
    save_series(TimeSeries(0, 1, ramp_load(80, 100, 900, 10)), workdir / "load.csv")
    assert run("train", "--data", workdir / "load.csv", "--epochs", 1, "--hidden", 4, "--layers", 1,
               "--out", workdir / "t") == 0
    assert run("autoscale-sim", "--graph", workdir / "g.json", "--load", workdir / "load.csv",
               "--forecaster", workdir / "t" / "gru.npz", "--interval", 5, "--out", workdir / "s") == 0
    assert len(read_csv(workdir / "s" / "episode.csv")) == 80
