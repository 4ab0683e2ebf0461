"""Resampling a base load at new sampling rates and matching statistics.

Run with ``python demos/01_load_simulation.py``.
"""

# %%
import numpy as np

from edgescale.series import (EventLog, SimConfig, TargetStats, count_per_window, match_statistics,
                              simulate_iot_load, synthetic_base)

# A 50-hour base series at 5 minute resolution: level, slow trend, daily-ish cycle.
base = synthetic_base(n=600)
print("base:", len(base), "points every", base.sampling_rate, "s, mean", round(base.values.mean(), 1))

# %%
# Resample to 1, 2 and 5 minutes. Finer windows see fewer events each, which is
# what the adjustment factor alpha = alpha_base / (new / base) compensates for.
loads = {}
for rate in (60, 120, 300):
    loads[rate] = simulate_iot_load(base, SimConfig(rate, noise_fraction=0.10, seed=0))
    v = loads[rate].values
    print(f"{rate:>4}s: {len(v):5d} points  mean {v.mean():8.1f}  std {v.std():7.1f}")

# %%
# A raw event log (think taxi pickups) becomes a count series by tumbling windows,
# then gets rescaled to the IoT load's first two moments so both sources share a scale.
rng = np.random.default_rng(1)
hours = rng.uniform(0, 50, 40_000)
events = EventLog(np.sort(hours * 3600 + 900 * np.sin(hours)))
counts = count_per_window(events, 60)
target = TargetStats(loads[60].values.mean(), loads[60].values.std())
matched = match_statistics(counts, target)
print("event counts per minute: mean", round(counts.values.mean(), 2), "-> matched mean",
      round(matched.values.mean(), 2), "std", round(matched.values.std(), 2))
