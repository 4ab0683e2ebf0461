"""Proactive scaling of a source -> filter -> sink job under a load step and a ramp.

Run with ``python demos/04_autoscaling.py``.
"""

# %%
from edgescale import autoscaler as asc
from edgescale.dsp import Simulator

# The filter handles 300 tuples/s per replica; the load jumps from 200 to 600 at tick 50.
load = asc.step_load(150, 200, 600, 50)
on = asc.run_loop(Simulator(asc.demo_graph()), asc.OracleForecaster(load), load)
off = asc.run_loop(Simulator(asc.demo_graph()), asc.OracleForecaster(load), load,
                   asc.LoopConfig(scaling_enabled=False))
for tick, op, kind, target, reason in on.actions:
    print(f"tick {tick}: {op} {kind} -> {target} ({reason})")
print("max queue with scaling", on.max_queue, "without", off.max_queue)

# %%
# A ramp from 100 to 2000 tuples/s needs several scale-ups; each one costs a paused tick.
ramp = asc.ramp_load(200, 100, 2000, hold=20)
ep = asc.run_loop(Simulator(asc.demo_graph()), asc.OracleForecaster(ramp), ramp)
print(ep.summary())

# %%
# When the filter is capped at 2 replicas, persistent backpressure at the cap
# hands the operator to the load balancer, which offloads it when the edge
# latency exceeds migration plus cloud latency.
capped = Simulator(asc.demo_graph(max_parallelism=2))
ep = asc.run_loop(capped, asc.OracleForecaster(ramp), ramp)
print("migrations:", [(t, op) for t, op, kind, *_ in ep.actions if kind == asc.MIGRATE])
print("filter now runs on", capped.graph.ops["filter"].location)
