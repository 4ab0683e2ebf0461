"""Dataflow graph model, operator rate arithmetic and a discrete-time queue simulator."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from graphlib import CycleError, TopologicalSorter

KINDS = ("source", "stateless", "stateful", "sink")


@dataclass
class Operator:
    id: str
    kind: str
    per_replica_rate: float          # tuples/s one replica can process
    selectivity: float = 1.0
    replicas: int = 1
    max_parallelism: int = 8
    queue: float = 0.0
    state_size: float = 0.0
    location: str = "edge"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"operator {self.id}: unknown kind {self.kind!r}")
        if self.per_replica_rate < 0 or self.queue < 0:
            raise ValueError(f"operator {self.id}: rates and queue must be nonnegative")
        if not self.selectivity > 0:
            raise ValueError(f"operator {self.id}: selectivity must be positive")
        if not 1 <= self.replicas <= self.max_parallelism:
            raise ValueError(f"operator {self.id}: replicas {self.replicas} outside [1, {self.max_parallelism}]")


@dataclass(frozen=True)
class RateSample:
    records_processed: float
    records_emitted: float
    window: float

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError("rate window must be positive")
        if self.records_processed < 0 or self.records_emitted < 0:
            raise ValueError("record counts must be nonnegative")


def _ceil_div(num, den) -> int:
    return math.ceil(Fraction(num) / Fraction(den))


def true_rate(sample: RateSample) -> tuple:
    """Per-replica processing and output rates, ``ceil(count / window)``."""
    if not sample.window > 0:
        raise ValueError("rate window must be positive")
    return (_ceil_div(sample.records_processed, sample.window),
            _ceil_div(sample.records_emitted, sample.window))


def aggregate_rates(op: Operator, samples) -> tuple:
    """Sum per-replica true rates over the operator's ``replicas`` samples."""
    samples = list(samples)
    if len(samples) != op.replicas:
        raise ValueError(f"operator {op.id}: {len(samples)} samples for {op.replicas} replicas")
    rates = [true_rate(s) for s in samples]
    return sum(r[0] for r in rates), sum(r[1] for r in rates)


class DataflowGraph:
    """Operators plus directed edges; validated as a connected DAG."""

    def __init__(self, operators, edges):
        self.ops: dict = {}
        for op in operators:
            if op.id in self.ops:
                raise ValueError(f"duplicate operator id {op.id!r}")
            self.ops[op.id] = op
        self.edges = [tuple(e) for e in edges]
        self._up = {i: [] for i in self.ops}
        self._down = {i: [] for i in self.ops}
        for a, b in self.edges:
            if a not in self.ops or b not in self.ops:
                raise ValueError(f"edge {a}->{b} references an unknown operator")
            self._down[a].append(b)
            self._up[b].append(a)
        try:
            self.order = list(TopologicalSorter({i: self._up[i] for i in self.ops}).static_order())
        except CycleError as exc:
            raise ValueError(f"dataflow graph has a cycle: {exc.args[1]}") from None
        self._validate()

    def _validate(self):
        if not self.ops:
            raise ValueError("empty dataflow graph")
        for i, op in self.ops.items():
            if op.kind == "source" and self._up[i]:
                raise ValueError(f"source {i} has incoming edges")
            if op.kind == "sink" and self._down[i]:
                raise ValueError(f"sink {i} has outgoing edges")
            if op.kind != "source" and not self._up[i]:
                raise ValueError(f"operator {i} has no upstream and is not a source")
        # weak connectivity
        seen, stack = set(), [next(iter(self.ops))]
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self._up[i] + self._down[i])
        if len(seen) != len(self.ops):
            raise ValueError("dataflow graph is not connected")

    def upstream(self, op_id) -> list:
        return list(self._up[op_id])

    def downstream(self, op_id) -> list:
        return list(self._down[op_id])

    @property
    def sources(self) -> list:
        return [i for i in self.order if self.ops[i].kind == "source"]

    @property
    def sinks(self) -> list:
        return [i for i in self.order if not self._down[i]]

    def copy(self) -> "DataflowGraph":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {"operators": [asdict(self.ops[i]) for i in self.ops],
                "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, data: dict) -> "DataflowGraph":
        return cls([Operator(**o) for o in data["operators"]], data["edges"])

    @classmethod
    def load(cls, path) -> "DataflowGraph":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass
class Parallelism:
    eta: dict                  # clamped to [1, max_parallelism]
    raw: dict                  # unclamped ceiling
    saturated: dict            # raw > max_parallelism

    def __getitem__(self, op_id):
        return self.eta[op_id]


def min_parallelism(graph: DataflowGraph, rates: dict, ingress=None) -> Parallelism:
    """Minimum replicas per operator to absorb its input.

    ``rates[op] = (p_i, sigma_i, k)``: aggregate processing rate, aggregate
    output rate and current replica count. A non-source operator needs
    ``ceil(sum of upstream sigma_j / (p_i / k))`` replicas. Sources are
    sized the same way from ``ingress`` (a number shared evenly across
    sources, or a per-source mapping); without ingress they keep ``k``.
    """
    eta, raw, sat = {}, {}, {}
    sources = graph.sources
    for i in graph.order:
        op = graph.ops[i]
        p_i, _, k = rates[i]
        if op.kind == "source":
            if ingress is None:
                need = int(k)
                raw[i] = need
                eta[i] = min(max(need, 1), op.max_parallelism)
                sat[i] = need > op.max_parallelism
                continue
            load = ingress[i] if isinstance(ingress, dict) else Fraction(ingress) / len(sources)
        else:
            load = sum(Fraction(rates[j][1]) for j in graph.upstream(i))
        load = Fraction(load)
        per_replica = Fraction(p_i) / Fraction(k)
        if per_replica == 0:
            if load > 0:
                raise ValueError(f"stalled operator {i}: zero processing rate with positive input")
            need = 0
        else:
            need = math.ceil(load / per_replica)
        raw[i] = need
        eta[i] = min(max(need, 1), op.max_parallelism)
        sat[i] = need > op.max_parallelism
    return Parallelism(eta, raw, sat)


@dataclass
class SimMetrics:
    tick: int
    ingress: float
    processed: dict
    throughput: dict           # emitted tuples/s per operator
    queues: dict
    backpressure: dict
    replicas: dict
    latency: float
    paused: bool = False
    sink_output: float = 0.0

    def max_queue(self) -> float:
        return max(self.queues.values()) if self.queues else 0.0


class Simulator:
    """Single-clock fluid simulation of a dataflow graph.

    Each tick, operators run in topological order: input is the upstream
    emissions of this tick plus the operator's queue, at most
    ``replicas * rate * dt`` tuples are processed, ``processed *
    selectivity`` are emitted downstream (to every consumer) and the rest
    stays queued. Sources receive the tick's ingress, split evenly when
    there are several.
    """

    def __init__(self, graph: DataflowGraph, dt: float = 1.0, backpressure_factor: float = 2.0,
                 cloud_rate_factor: float = 4.0, cloud_latency: float = 0.0):
        self.graph = graph
        self.dt = dt
        self.backpressure_factor = backpressure_factor
        self.cloud_rate_factor = cloud_rate_factor
        self.cloud_latency = cloud_latency
        self.tick = 0
        self.pause_remaining = 0
        self.pending_latency: dict = {}     # one-time extra latency (migration cost) per op
        self.sink_total = 0.0
        self.ingress_total = 0.0
        self.last: SimMetrics | None = None

    def replica_rate(self, op: Operator) -> float:
        return op.per_replica_rate * (self.cloud_rate_factor if op.location == "cloud" else 1.0)

    def service_rate(self, op: Operator) -> float:
        return op.replicas * self.replica_rate(op)

    def threshold(self, op: Operator) -> float:
        return self.backpressure_factor * self.replica_rate(op) * self.dt

    def step(self, ingress: float) -> SimMetrics:
        g = self.graph
        paused = self.pause_remaining > 0
        if paused:
            self.pause_remaining -= 1
        emitted: dict = {}
        processed: dict = {}
        sources = g.sources
        for i in g.order:
            op = g.ops[i]
            if op.kind == "source":
                arriving = float(ingress) / len(sources)
            else:
                arriving = sum(emitted[j] for j in g.upstream(i))
            available = op.queue + arriving
            capacity = 0.0 if paused else self.service_rate(op) * self.dt
            done = min(available, capacity)
            op.queue = available - done
            processed[i] = done
            emitted[i] = done * op.selectivity
        for i in g.sinks:
            self.sink_total += emitted[i]
        self.ingress_total += float(ingress)

        latency = self._critical_path_latency()
        m = SimMetrics(
            tick=self.tick,
            ingress=float(ingress),
            processed=processed,
            throughput={i: emitted[i] / self.dt for i in g.order},
            queues={i: g.ops[i].queue for i in g.order},
            backpressure={i: g.ops[i].queue > self.threshold(g.ops[i]) for i in g.order},
            replicas={i: g.ops[i].replicas for i in g.order},
            latency=latency,
            paused=paused,
            sink_output=sum(emitted[i] for i in g.sinks),
        )
        self.pending_latency.clear()
        self.tick += 1
        self.last = m
        return m

    def operator_latency(self, op: Operator) -> float:
        """Queueing delay plus one service time, plus cloud round trip when migrated."""
        mu = self.service_rate(op)
        if mu <= 0:
            return math.inf if op.queue > 0 else 0.0
        lat = op.queue / mu + 1.0 / mu
        if op.location == "cloud":
            lat += self.cloud_latency
        return lat + self.pending_latency.get(op.id, 0.0)

    def _critical_path_latency(self) -> float:
        g = self.graph
        best: dict = {}
        for i in g.order:
            up = [best[j] for j in g.upstream(i)]
            best[i] = (max(up) if up else 0.0) + self.operator_latency(g.ops[i])
        return max(best[i] for i in g.sinks)

    def rate_samples(self, op_id) -> list:
        """Per-replica samples from the last tick (window = dt)."""
        op = self.graph.ops[op_id]
        done = self.last.processed[op_id] if self.last else 0.0
        k = op.replicas
        return [RateSample(done / k, done * op.selectivity / k, self.dt) for _ in range(k)]

    def in_flight(self) -> float:
        return sum(op.queue for op in self.graph.ops.values())

    def snapshot(self):
        return copy.deepcopy((self.graph, self.pause_remaining, self.pending_latency))

    def restore(self, snap) -> None:
        graph, self.pause_remaining, self.pending_latency = copy.deepcopy(snap)
        self.graph = graph


def simulate_step(sim: Simulator, ingress: float) -> SimMetrics:
    return sim.step(ingress)
