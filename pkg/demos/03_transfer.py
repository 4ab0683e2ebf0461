"""Adapting a trained GRU to a shifted target stream.

The target is a new realization of the same process lifted by a constant
offset. Only the first 10% of it is available for adaptation.
Run with ``python demos/03_transfer.py``.
"""

# %%
import numpy as np

from edgescale import forecasters as fc
from edgescale import transfer as tl
from edgescale.metrics import smape
from edgescale.series import SimConfig, simulate_iot_load, synthetic_base

source = simulate_iot_load(synthetic_base(n=400), SimConfig(300, seed=7))
model, _ = fc.train_gru(source, fc.ForecastConfig(seed=1))
target = simulate_iot_load(synthetic_base(n=1000), SimConfig(300, seed=8)).values + 300
prelim, rest = tl.preliminary_split(target)

# %%
# Screen candidate sources by DTW on the model's normalized scale.
norm = model.scaler.transform
# The offset makes even the matching process look distant in absolute terms;
# a series from a much burstier process is further still.
bursty = 3 * source.values - 2 * source.values.mean()
candidates = {"same-process": norm(source.values), "bursty": norm(bursty)}
for m in tl.select_sources(candidates, norm(prelim), threshold=np.inf):
    print(f"dtw to {m.key!r}: {m.distance:.3f}")
accepted = tl.select_sources(candidates, norm(prelim), threshold=25.0)
print("accepted at threshold 25:", [m.key for m in accepted])

# %%
ext = tl.FeatureExtractor.init(seed=3)
src, tgt = tl.domain_windows(source.values, model), tl.domain_windows(prelim, model)
adapted, trace = tl.joint_adapt(model, ext, src, tgt, tl.AdaptConfig())
for row in trace.rows:
    print("epoch {epoch}: task {task_loss:.4f}  mmd {mmd_loss:.4f}  cmmd {cmmd_loss:.4f}".format(**row))

# %%
L = model.cfg.seq_len
X, y = fc.make_windows(np.concatenate([prelim[-L:], rest]), L)
Xn = norm(X)
print(f"target SMAPE frozen  {smape(y, model.scaler.inverse(model.predict(Xn))):.2f}%")
print(f"target SMAPE adapted {smape(y, model.scaler.inverse(adapted.predict(Xn))):.2f}%")
