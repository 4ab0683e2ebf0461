"""GRU, CNN, ARIMA and persistence on a simulated load.

Run with ``python demos/02_forecasting.py`` (about half a minute).
"""

# %%
from edgescale import forecasters as fc
from edgescale.arima import arima_fit, arima_forecast_rolling
from edgescale.metrics import rmse, smape, timed
from edgescale.series import SimConfig, simulate_iot_load, synthetic_base, train_test_split

load = simulate_iot_load(synthetic_base(n=400), SimConfig(300, seed=7))
train, test = train_test_split(load, 0.8)
print(f"{len(train)} training points, {len(test)} test points")

# %%
# Every model predicts one step ahead from the true history (walk-forward).
cfg = fc.ForecastConfig(seed=1)


def neural(kind):
    model, report = fc.train_model(kind, train, cfg)
    print(f"  {kind} training mse {report.initial_loss:.4f} -> {report.final_loss:.4f}")
    return fc.walk_forward(model, train.values, test.values)


def arima():
    model = arima_fit(train)
    print("  arima order", model.order)
    return arima_forecast_rolling(model, test, window=24)


runs = {
    "gru": lambda: neural("gru"),
    "cnn": lambda: neural("cnn"),
    "arima": arima,
    "persistence": lambda: fc.persistence_forecast(train.values, test.values),
}

# %%
print(f"{'model':<12}{'smape %':>9}{'rmse':>9}{'seconds':>9}")
for name, run in runs.items():
    preds, dt = timed(run)
    print(f"{name:<12}{smape(test.values, preds):9.3f}{rmse(test.values, preds):9.2f}{dt:9.2f}")
