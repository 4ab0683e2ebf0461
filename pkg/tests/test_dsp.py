import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgescale.dsp import (DataflowGraph, Operator, RateSample, Simulator, aggregate_rates,
                           min_parallelism, true_rate)


def chain(*rates, selectivity=1.0, max_par=8):
    kinds = ["source"] + ["stateless"] * (len(rates) - 2) + ["sink"]
    ops = [Operator(f"o{i}", k, r, selectivity=selectivity, max_parallelism=max_par)
           for i, (k, r) in enumerate(zip(kinds, rates))]
    return DataflowGraph(ops, [(f"o{i}", f"o{i + 1}") for i in range(len(rates) - 1)])


def brute_force_eta(graph, rates, ingress):
    """Smallest k with k * per-replica rate >= input, found by linear search."""
    eta = {}
    for i in graph.order:
        op = graph.ops[i]
        p, _, k = rates[i]
        per = Fraction(p) / k
        if op.kind == "source":
            load = Fraction(ingress) / len(graph.sources)
        else:
            load = sum(Fraction(rates[j][1]) for j in graph.upstream(i))
        need = 0
        while need * per < load:
            need += 1
        eta[i] = min(max(need, 1), op.max_parallelism)
    return eta


def random_dag(rng, n):
    ops = [Operator("s0", "source", float(rng.uniform(50, 1000)), max_parallelism=8)]
    edges = []
    for i in range(1, n):
        kind = "sink" if i == n - 1 else str(rng.choice(["stateless", "stateful"]))
        ops.append(Operator(f"v{i}", kind, float(rng.uniform(50, 1000)), max_parallelism=8))
        ups = [o.id for o in ops[:i] if o.kind != "sink"]
        picks = rng.choice(len(ups), size=int(rng.integers(1, min(3, len(ups)) + 1)), replace=False)
        edges.extend((ups[j], f"v{i}") for j in picks)
    return DataflowGraph(ops, edges)


# ---- rates --------------------------------------------------------------

def test_true_rate():
    assert true_rate(RateSample(950, 950, 2)) == (475, 475)
    assert true_rate(RateSample(951, 10, 2)) == (476, 5)
    assert true_rate(RateSample(0, 0, 2)) == (0, 0)
    with pytest.raises(ValueError):
        RateSample(1, 1, 0)


def test_aggregate_rates():
    op = Operator("f", "stateless", 300, replicas=2)
    assert aggregate_rates(op, [RateSample(300, 300, 1)] * 2)[0] == 600
    assert aggregate_rates(Operator("g", "stateless", 300), [RateSample(300, 150, 1)]) == (300, 150)
    mixed = aggregate_rates(op, [RateSample(300, 300, 1), RateSample(250, 250, 1)])
    assert mixed == (550, 550)
    with pytest.raises(ValueError):
        aggregate_rates(op, [RateSample(1, 1, 1)])


# ---- parallelism --------------------------------------------------------

def test_single_upstream_example():
    g = chain(1000, 300, 1000)
    par = min_parallelism(g, {"o0": (1000, 500, 1), "o1": (300, 300, 1), "o2": (1000, 0, 1)})
    assert par["o1"] == 2


def test_two_upstreams():
    ops = [Operator("a", "source", 1000), Operator("b", "source", 1000),
           Operator("j", "stateless", 300), Operator("z", "sink", 1000)]
    g = DataflowGraph(ops, [("a", "j"), ("b", "j"), ("j", "z")])
    rates = {"a": (1000, 400, 1), "b": (1000, 350, 1), "j": (300, 0, 1), "z": (1000, 0, 1)}
    assert min_parallelism(g, rates)["j"] == math.ceil(750 / 300) == 3


def test_zero_input_clamps_to_one():
    g = chain(100, 300, 100)
    par = min_parallelism(g, {"o0": (100, 0, 1), "o1": (300, 0, 1), "o2": (100, 0, 1)})
    assert par.raw["o1"] == 0 and par["o1"] == 1


def test_saturation_flag():
    g = chain(1000, 100, 1000, max_par=4)
    par = min_parallelism(g, {"o0": (1000, 1000, 1), "o1": (100, 0, 1), "o2": (1000, 0, 1)})
    assert par.raw["o1"] == 10 and par["o1"] == 4 and par.saturated["o1"]


def test_stalled_operator():
    g = chain(100, 0, 100)
    with pytest.raises(ValueError, match="stalled"):
        min_parallelism(g, {"o0": (100, 50, 1), "o1": (0, 0, 1), "o2": (100, 0, 1)})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8), st.floats(0, 5000))
def test_matches_brute_force(seed, n, ingress):
    rng = np.random.default_rng(seed)
    g = random_dag(rng, n)
    rates = {i: (float(rng.uniform(50, 1000)), float(rng.uniform(50, 1000)), int(rng.integers(1, 4)))
             for i in g.order}
    assert min_parallelism(g, rates, ingress).eta == brute_force_eta(g, rates, ingress)


# ---- graph validation ---------------------------------------------------

def test_graph_rejects_bad_topologies():
    a, b, c = Operator("a", "source", 1), Operator("b", "stateless", 1), Operator("c", "sink", 1)
    with pytest.raises(ValueError, match="cycle"):
        DataflowGraph([a, Operator("x", "stateless", 1), Operator("y", "stateless", 1)],
                      [("a", "x"), ("x", "y"), ("y", "x")])
    with pytest.raises(ValueError, match="unknown"):
        DataflowGraph([a, c], [("a", "q")])
    with pytest.raises(ValueError, match="duplicate"):
        DataflowGraph([a, a], [])
    with pytest.raises(ValueError, match="connected"):
        DataflowGraph([a, c, Operator("a2", "source", 1), Operator("c2", "sink", 1)],
                      [("a", "c"), ("a2", "c2")])
    with pytest.raises(ValueError, match="no upstream"):
        DataflowGraph([a, b], [])
    with pytest.raises(ValueError):
        Operator("bad", "mystery", 1)


def test_graph_json_roundtrip(tmp_path):
    g = chain(500, 300, 200, 1000, selectivity=0.5)
    g.save(tmp_path / "g.json")
    back = DataflowGraph.load(tmp_path / "g.json")
    assert back.to_dict() == g.to_dict() and back.order == g.order


# ---- simulator ----------------------------------------------------------

def test_no_queues_under_capacity():
    sim = Simulator(chain(1000, 500, 1000))
    for _ in range(20):
        m = sim.step(400)
    assert m.max_queue() == 0 and not any(m.backpressure.values())


def test_single_operator_queue_growth():
    sim = Simulator(DataflowGraph([Operator("only", "source", 100)], []))
    queues = [sim.step(150).queues["only"] for _ in range(4)]
    assert queues == [50, 100, 150, 200]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 2000), min_size=10, max_size=10), st.integers(2, 5))
def test_conservation(load, n):
    rng = np.random.default_rng(n)
    sim = Simulator(chain(*rng.uniform(100, 800, n)))
    for x in load:
        sim.step(x)
    assert sim.sink_total + sim.in_flight() == pytest.approx(sum(load), rel=1e-9, abs=1e-6)


def test_selectivity_scales_output():
    sim = Simulator(chain(1000, 1000, 1000, selectivity=0.5))
    m = sim.step(400)
    assert m.sink_output == pytest.approx(400 * 0.5 ** 3)


def test_pause_accumulates():
    sim = Simulator(chain(1000, 1000, 1000))
    sim.pause_remaining = 1
    m = sim.step(300)
    assert m.paused and m.queues["o0"] == 300
    m = sim.step(300)
    assert not m.paused and m.max_queue() == 0


def test_snapshot_restore():
    sim = Simulator(chain(1000, 100, 1000))
    sim.step(300)
    snap = sim.snapshot()
    sim.graph.ops["o1"].replicas = 3
    sim.step(300)
    sim.restore(snap)
    assert sim.graph.ops["o1"].replicas == 1 and sim.graph.ops["o1"].queue == 200


def test_latency_critical_path():
    sim = Simulator(chain(100, 50, 100))
    m = sim.step(10)
    hand = (0 / 100 + 1 / 100) + (0 / 50 + 1 / 50) + (0 / 100 + 1 / 100)
    assert m.latency == pytest.approx(hand)
