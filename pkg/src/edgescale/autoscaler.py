"""MAPE-K horizontal autoscaler driving the dataflow simulator.

The Knowledge base is an in-memory ring buffer of simulator snapshots and
forecasts. Each control interval the loop monitors, analyzes, plans on
the forecast for the *next* interval and executes the plan, so capacity
changes land one interval ahead of the load they are sized for.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dsp import DataflowGraph, SimMetrics, Simulator, min_parallelism

log = logging.getLogger(__name__)

HOLD, UP, DOWN, MIGRATE = "hold", "scale-up", "scale-down", "migrate"


@dataclass(frozen=True)
class LatencyProfile:
    edge_latency: float | None = None    # None -> use the measured operator latency
    migration_latency: float = 0.040
    cloud_latency: float = 0.050

    def __post_init__(self):
        for v in (self.edge_latency, self.migration_latency, self.cloud_latency):
            if v is not None and v < 0:
                raise ValueError("latencies must be nonnegative")


def load_balancer_decide(op_id, profile: LatencyProfile, at_max: bool, edge_latency: float | None = None) -> str:
    """``"migrate"`` iff the operator is at max parallelism and edge latency
    exceeds migration plus cloud latency, else ``"stay"``."""
    eps = profile.edge_latency if profile.edge_latency is not None else edge_latency
    if eps is None:
        raise ValueError(f"no edge latency known for operator {op_id}")
    if at_max and eps > profile.migration_latency + profile.cloud_latency:
        return "migrate"
    return "stay"


# --------------------------------------------------------------------------
# knowledge

@dataclass
class Snapshot:
    tick: int
    metrics: SimMetrics
    forecast: float | None = None


class MetricsStore:
    def __init__(self, retention: int = 1000):
        if retention < 1:
            raise ValueError("retention must be >= 1")
        self.retention = retention
        self.entries: deque = deque(maxlen=retention)

    def append(self, snap: Snapshot) -> None:
        if self.entries and snap.tick < self.entries[-1].tick:
            raise ValueError("snapshots must be appended in time order")
        self.entries.append(snap)

    def __len__(self) -> int:
        return len(self.entries)

    def latest(self) -> Snapshot:
        return self.entries[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tick", "ingress", "forecast", "latency", "max_queue", "backpressure_ops"])
            for s in self.entries:
                m = s.metrics
                w.writerow([s.tick, f"{m.ingress:.6g}", "" if s.forecast is None else f"{s.forecast:.6g}",
                            f"{m.latency:.6g}", f"{m.max_queue():.6g}",
                            ";".join(k for k, v in m.backpressure.items() if v)])


def monitor(sim: Simulator, store: MetricsStore, forecast: float | None = None) -> Snapshot:
    """Persist the simulator's latest metrics (and forecast) to the store."""
    if sim.last is None:
        raise ValueError("simulator has not produced metrics yet")
    snap = Snapshot(sim.last.tick, sim.last, forecast)
    store.append(snap)
    return snap


# --------------------------------------------------------------------------
# analyze

@dataclass
class Indicators:
    tick: int
    throughput: float
    latency: float
    queues: dict
    backpressure: dict
    queue_trend: dict               # sign of the least-squares queue slope
    persistent_backpressure: dict   # consecutive flagged snapshots, newest backwards
    operator_latency: dict


def analyze(store: MetricsStore, trend_window: int = 5, sim: Simulator | None = None) -> Indicators:
    if not len(store):
        raise ValueError("metrics store is empty")
    recent = list(store.entries)[-trend_window:]
    last = recent[-1].metrics
    trend = {}
    for op in last.queues:
        q = np.array([s.metrics.queues[op] for s in recent])
        if q.size < 2:
            trend[op] = 0
            continue
        t = np.arange(q.size, dtype=float)
        slope = np.polyfit(t, q, 1)[0]
        trend[op] = int(np.sign(slope)) if abs(slope) > 1e-9 else 0
    streak = {}
    for op in last.backpressure:
        n = 0
        for s in reversed(store.entries):
            if not s.metrics.backpressure[op]:
                break
            n += 1
        streak[op] = n
    op_lat = {}
    if sim is not None:
        op_lat = {i: sim.operator_latency(sim.graph.ops[i]) for i in sim.graph.order}
    return Indicators(
        tick=last.tick,
        throughput=last.sink_output,
        latency=last.latency,
        queues=dict(last.queues),
        backpressure=dict(last.backpressure),
        queue_trend=trend,
        persistent_backpressure=streak,
        operator_latency=op_lat,
    )


# --------------------------------------------------------------------------
# plan / execute

@dataclass
class Action:
    kind: str
    target: int
    reason: str = ""


@dataclass
class ScalingPlan:
    actions: dict = field(default_factory=dict)
    migrations: list = field(default_factory=list)

    @property
    def is_hold(self) -> bool:
        return not self.migrations and all(a.kind == HOLD for a in self.actions.values())

    def changes(self) -> dict:
        return {k: a for k, a in self.actions.items() if a.kind != HOLD}


def expected_rates(graph: DataflowGraph, ingress: float, replica_rate) -> dict:
    """Propagate a forecast ingress through the graph.

    Returns ``op -> (p_i, sigma_i, k)`` where ``sigma_i`` is the operator's
    expected output if it keeps up with its input.
    """
    out = {}
    exp_out = {}
    sources = graph.sources
    for i in graph.order:
        op = graph.ops[i]
        if op.kind == "source":
            inp = ingress / len(sources)
        else:
            inp = sum(exp_out[j] for j in graph.upstream(i))
        exp_out[i] = inp * op.selectivity
        out[i] = (replica_rate(op) * op.replicas, exp_out[i], op.replicas, inp)
    return out


class Planner:
    """Turns indicators and a forecast into a scaling plan.

    Scale-ups apply immediately. Scale-downs need the forecast input to sit
    at or below ``down_fraction`` of current capacity for ``down_intervals``
    consecutive plans. An edge operator already at max parallelism whose
    backpressure persisted for ``persistence`` analyses is handed to the
    load balancer.
    """

    def __init__(self, profile: LatencyProfile = LatencyProfile(), down_fraction: float = 0.7,
                 down_intervals: int = 3, persistence: int = 3):
        self.profile = profile
        self.down_fraction = down_fraction
        self.down_intervals = down_intervals
        self.persistence = persistence
        self._low: dict = {}

    def plan(self, ind: Indicators, forecast: float, sim: Simulator) -> ScalingPlan:
        graph = sim.graph
        exp = expected_rates(graph, forecast, sim.replica_rate)
        rates = {i: v[:3] for i, v in exp.items()}
        par = min_parallelism(graph, rates, ingress=forecast)
        plan = ScalingPlan()
        for i in graph.order:
            op = graph.ops[i]
            k, target = op.replicas, par.eta[i]
            capacity = sim.service_rate(op) * sim.dt
            expected_in = exp[i][3] * sim.dt
            if op.location == "cloud":
                plan.actions[i] = Action(HOLD, k, "migrated")
                continue
            at_max = k == op.max_parallelism
            if at_max and ind.persistent_backpressure.get(i, 0) >= self.persistence:
                decision = load_balancer_decide(i, self.profile, at_max, ind.operator_latency.get(i))
                if decision == "migrate":
                    plan.migrations.append(i)
                    plan.actions[i] = Action(MIGRATE, op.max_parallelism, "persistent backpressure at max")
                    continue
            if target > k:
                self._low[i] = 0
                plan.actions[i] = Action(UP, target, f"forecast input {expected_in:.6g} > capacity {capacity:.6g}")
            elif target < k and expected_in <= self.down_fraction * capacity:
                self._low[i] = self._low.get(i, 0) + 1
                if self._low[i] >= self.down_intervals:
                    self._low[i] = 0
                    plan.actions[i] = Action(DOWN, target, "forecast below capacity margin")
                else:
                    plan.actions[i] = Action(HOLD, k, "scale-down hysteresis")
            else:
                self._low[i] = 0
                plan.actions[i] = Action(HOLD, k, "")
        return plan


def execute(plan: ScalingPlan, sim: Simulator, pause_ticks: int = 1,
            profile: LatencyProfile = LatencyProfile()) -> None:
    """Apply a plan atomically: on any error the simulator is left unchanged."""
    snap = sim.snapshot()
    try:
        ops = sim.graph.ops
        for i in list(plan.actions) + list(plan.migrations):
            if i not in ops:
                raise KeyError(f"plan references unknown operator {i!r}")
        if plan.is_hold:
            return
        for i, a in plan.actions.items():
            op = ops[i]
            if a.kind in (UP, DOWN):
                if not 1 <= a.target <= op.max_parallelism:
                    raise ValueError(f"operator {i}: target {a.target} outside [1, {op.max_parallelism}]")
                op.replicas = a.target
        for i in plan.migrations:
            op = ops[i]
            op.location = "cloud"
            op.replicas = op.max_parallelism
            sim.pending_latency[i] = sim.pending_latency.get(i, 0.0) + profile.migration_latency
        sim.cloud_latency = profile.cloud_latency
        sim.pause_remaining = max(sim.pause_remaining, pause_ticks)
    except Exception:
        sim.restore(snap)
        raise


# --------------------------------------------------------------------------
# loop

class OracleForecaster:
    """Knows the load schedule; returns the true future values."""

    def __init__(self, load):
        self.load = np.asarray(load, dtype=float)

    def __call__(self, history, steps: int) -> np.ndarray:
        t = len(history)
        fut = self.load[t:t + steps]
        if fut.size < steps:
            pad = fut[-1] if fut.size else (self.load[-1] if self.load.size else 0.0)
            fut = np.concatenate([fut, np.full(steps - fut.size, pad)])
        return fut


class ModelForecaster:
    """Wraps a trained next-step model; recursive multi-step over the last window."""

    def __init__(self, model):
        self.model = model

    def __call__(self, history, steps: int) -> np.ndarray:
        from .forecasters import forecast_recursive

        history = np.asarray(history, dtype=float)
        L = self.model.cfg.seq_len
        if history.size < L:
            raise ValueError(f"need {L} observations, have {history.size}")
        window = self.model.scaler.transform(history[-L:])
        return forecast_recursive(self.model, window, steps)


@dataclass(frozen=True)
class LoopConfig:
    control_interval: int = 1
    pause_ticks: int = 1
    scaling_enabled: bool = True
    retention: int = 1000
    profile: LatencyProfile = LatencyProfile()


@dataclass
class Episode:
    rows: list
    actions: list          # (tick, op, kind, target, reason)
    store: MetricsStore

    @property
    def max_queue(self) -> float:
        return max((r["max_queue"] for r in self.rows), default=0.0)

    def summary(self) -> dict:
        kinds = [a[2] for a in self.actions]
        return {
            "ticks": len(self.rows),
            "max_queue": self.max_queue,
            "action_count": len(kinds),
            "scale_ups": kinds.count(UP),
            "scale_downs": kinds.count(DOWN),
            "migrations": kinds.count(MIGRATE),
            "backpressure_ticks": sum(1 for r in self.rows if r["backpressure"]),
            "max_latency": max((r["latency"] for r in self.rows), default=0.0),
        }

    def write_csv(self, path, op_ids) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tick", "ingress", "forecast"] + [f"eta_{i}" for i in op_ids]
                       + [f"queue_{i}" for i in op_ids] + ["latency", "backpressure", "actions"])
            for r in self.rows:
                w.writerow([r["tick"], f"{r['ingress']:.6g}",
                            "" if r["forecast"] is None else f"{r['forecast']:.6g}"]
                           + [r["replicas"][i] for i in op_ids]
                           + [f"{r['queues'][i]:.6g}" for i in op_ids]
                           + [f"{r['latency']:.6g}", ";".join(r["backpressure"]), r["actions"]])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_loop(sim: Simulator, forecaster, load, cfg: LoopConfig = LoopConfig()) -> Episode:
    """Drive the simulator over ``load`` (ingress per tick) with a MAPE-K loop.

    At the start of each control interval the loop monitors the latest
    metrics, analyzes the store, asks the forecaster for the following
    interval's load (peak per tick), plans on that forecast and executes.
    A failing forecaster falls back to the last observed ingress.
    """
    load = np.asarray(load, dtype=float)
    N = cfg.control_interval
    if N < 1:
        raise ValueError("control interval must be >= 1 tick")
    store = MetricsStore(cfg.retention)
    planner = Planner(cfg.profile)
    rows, actions = [], []
    forecast = None
    for t in range(load.size):
        tick_actions = []
        if t % N == 0 and sim.last is not None:
            history = load[:t]
            try:
                ahead = np.asarray(forecaster(history, 2 * N), dtype=float)
                forecast = float(np.max(ahead[N:2 * N]))
                if not np.isfinite(forecast):
                    raise ValueError("non-finite forecast")
            except Exception as exc:
                log.warning("tick %d: forecaster failed (%s); using last value", t, exc)
                forecast = float(history[-1])
            monitor(sim, store, forecast)
            if cfg.scaling_enabled:
                ind = analyze(store, sim=sim)
                plan = planner.plan(ind, forecast, sim)
                execute(plan, sim, cfg.pause_ticks, cfg.profile)
                for i, a in plan.changes().items():
                    actions.append((t, i, a.kind, a.target, a.reason))
                    tick_actions.append(f"{i}:{a.kind}:{a.target}")
        m = sim.step(load[t])
        rows.append({"tick": t, "ingress": m.ingress, "forecast": forecast,
                     "replicas": dict(m.replicas), "queues": dict(m.queues),
                     "max_queue": m.max_queue(), "latency": m.latency,
                     "backpressure": [i for i, v in m.backpressure.items() if v],
                     "actions": ";".join(tick_actions)})
    return Episode(rows, actions, store)


def step_load(n: int, low: float, high: float, at: int) -> np.ndarray:
    """Constant ``low`` ingress that jumps to ``high`` at tick ``at``."""
    load = np.full(n, float(low))
    load[at:] = high
    return load


def ramp_load(n: int, start: float, end: float, hold: int = 0) -> np.ndarray:
    """Linear ramp over ``n - hold`` ticks, then ``hold`` ticks at ``end``."""
    ramp = np.linspace(start, end, n - hold)
    return np.concatenate([ramp, np.full(hold, float(end))])


def demo_graph(filter_rate: float = 300.0, max_parallelism: int = 8) -> DataflowGraph:
    """source -> filter -> sink chain; the filter is the scaling bottleneck."""
    from .dsp import Operator

    return DataflowGraph(
        [Operator("source", "source", 5000.0, max_parallelism=max_parallelism),
         Operator("filter", "stateless", filter_rate, selectivity=1.0, max_parallelism=max_parallelism),
         Operator("sink", "sink", 5000.0, max_parallelism=max_parallelism)],
        [("source", "filter"), ("filter", "sink")],
    )
