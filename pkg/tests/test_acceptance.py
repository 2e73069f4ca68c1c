"""Acceptance suite: one test per criterion.

A pass/fail line per criterion is printed in the terminal summary (see conftest).
"""

import random
import time

import numpy as np
import pytest

from helpers import chain_graph, integer_inputs, random_basic_plan, random_graph_spec
from tdlpart.errors import IndivisibleShape
from tdlpart.graph import coarsen, load_graph
from tdlpart.intervals import concretize
from tdlpart.materialize import (insert_control_deps, materialize, plan_memory,
                                 run_partitioned, run_reference)
from tdlpart.models import conv_group, matmul_graph, mlp, residual_block, resnet, rnn, single_op
from tdlpart.planner import (RecursivePlan, brute_force_oracle, cost_vector, initial_shapes,
                             make_plan, plan_cost, recursive_partition, sequence_cost)
from tdlpart.sim import Topology, simulate
from tdlpart.strategies import HaloSlice, Slice, Whole, count_nd_partitions, discover_strategies, symbol_bounds
from tdlpart.tdl import load_corpus

CORPUS = load_corpus()


def test_criterion_1_conv1d_strategies():
    start = time.perf_counter()
    strategies = {s.split_dim: s for s in discover_strategies(CORPUS["conv1d"], 2)}
    elapsed = time.perf_counter() - start

    by_b = strategies["b"]
    assert by_b.kind == "concat" and by_b.out_axis == 0
    for part in range(2):
        assert by_b.input_region("filters", part) == (Whole(), Whole(), Whole())
        assert by_b.input_region("data", part) == (Slice(part, 2), Whole(), Whole())

    by_ci = strategies["ci"]
    assert by_ci.kind == "reduce" and by_ci.reducer == "Sum"
    for part in range(2):
        assert by_ci.input_region("data", part) == (Whole(), Slice(part, 2), Whole())
        assert by_ci.input_region("filters", part) == (Slice(part, 2), Whole(), Whole())
    assert elapsed < 1.0


def test_criterion_2_shift_two_regions():
    d = CORPUS["shift_two"]
    (strategy,) = discover_strategies(d, 2)
    bounds = symbol_bounds(d, {"A": (12,)}, {"i": 10})
    got = [concretize(strategy.input_intervals("A", part)[0], bounds) for part in range(2)]
    assert got == [(2, 7), (7, 12)]
    assert all(isinstance(strategy.input_region("A", p)[0], HaloSlice) for p in range(2))


def test_criterion_3_search_space_counts():
    assert count_nd_partitions(4, 3) == 20
    plan = recursive_partition(load_graph(conv_group()), 8)
    assert plan.factors == [2, 2, 2]
    per_step = [max(s) for s in plan.stats]
    assert all(n <= 4 ** 6 for n in per_step)
    assert sum(per_step) <= 3 * 4096
    assert 3 * 4096 < 20 ** 6


def test_criterion_4_oracle_optimality():
    rng = random.Random(20240501)
    start = time.perf_counter()
    mismatches = []
    for i in range(100):
        g = load_graph(random_graph_spec(rng, max_ops=6))
        assert sum(1 for grp in coarsen(g).groups if grp.kind == "op") <= 6
        k = rng.choice([2, 4])
        dp = recursive_partition(g, k).total_cost
        best = brute_force_oracle(g, k, max_size=10 ** 9).total_cost
        if dp != best:
            mismatches.append((i, k, dp, best))
    assert mismatches == []
    assert time.perf_counter() - start < 300


def test_criterion_5_cost_properties():
    start = time.perf_counter()
    rng = random.Random(7)
    for _ in range(200):
        g = load_graph(random_graph_spec(rng))
        p1, p2 = random_basic_plan(g, rng), random_basic_plan(g, rng)
        assert sequence_cost(g, [p1, p2])[1] == sequence_cost(g, [p2, p1])[1]

    fixtures = [mlp(), residual_block(), rnn(), conv_group(), matmul_graph(8)]
    fixtures += [random_graph_spec(rng) for _ in range(30)]
    for spec in fixtures:
        g = load_graph(spec)
        for k in (4, 8):
            try:
                deltas = recursive_partition(g, k).step_costs
            except IndivisibleShape:
                continue  # no plan is returned, so there is nothing to check
            assert all(a <= b for a, b in zip(deltas, deltas[1:])), deltas

    for _ in range(50):
        g = load_graph(random_graph_spec(rng))
        plan = random_basic_plan(g, rng)
        base = initial_shapes(g)
        cost = plan_cost(g, plan, base)
        vec = cost_vector(g, plan, base)
        for c in (2, 3):
            scaled = {t: tuple(c * n for n in s) for t, s in base.items()}
            # every tensor is rank 2, so its size grows by c**2
            assert plan_cost(g, plan, scaled) == c * c * cost
            sizes = {t: int(np.prod(s)) for t, s in scaled.items()}
            assert vec.evaluate(sizes) == pytest.approx(c * c * cost, abs=1e-9)
    assert time.perf_counter() - start < 60


def _equivalent(g, plan):
    pg = insert_control_deps(materialize(g, plan), g)
    inputs = integer_inputs(g)
    want = run_reference(g, inputs)
    got = run_partitioned(pg, g, inputs)
    return pg, all(np.array_equal(got[t], want[t]) for t in g.tensors)


def _single_step(g, ways, dims, split):
    plan = make_plan(g, ways, dims, split)
    return RecursivePlan(ways, [ways], [plan], [plan.cost], plan.cost)


def test_criterion_6_semantic_equivalence():
    cases = []
    for k in (2, 4, 8):
        for spec in (matmul_graph(8), mlp(), residual_block(), rnn(), conv_group()):
            cases.append((spec, k))
    for spec in (matmul_graph(12), mlp(batch=12, widths=[12, 12, 12]), residual_block(12, 12)):
        cases.append((spec, 3))
    failures = []
    for spec, k in cases:
        g = load_graph(spec)
        _, ok = _equivalent(g, recursive_partition(g, k))
        if not ok:
            failures.append((sorted(spec["ops"]), k))

    mm = load_graph(matmul_graph(8))
    pg, ok = _equivalent(mm, _single_step(mm, 2, {"A": 1, "B": 0, "C": 0}, {"mm": "k"}))
    assert pg.reduce_nodes(), "the Reduce fixture must materialize reduce nodes"
    if not ok:
        failures.append(("reduce", 2))

    conv = load_graph(single_op("conv1d", [(4, 4, 8), (4, 4, 3)], (4, 4, 8)))
    for k in (2, 4, 8):
        plan = _single_step(conv, k, {"in0": 2, "in1": 0, "out": 2}, {"op": "x"})
        assert plan.steps[0].op_strategies["op"].has_halo
        _, ok = _equivalent(conv, plan)
        if not ok:
            failures.append(("halo", k))
    assert failures == []


def test_criterion_7_memory():
    for spec, k in ((mlp(), 2), (mlp(), 4), (matmul_graph(8), 8), (conv_group(), 8)):
        g = load_graph(spec)
        pg = materialize(g, recursive_partition(g, k))
        total = sum(int(np.prod(t.shape)) * 4 for t in g.tensors.values())
        assert [pg.stored_bytes(w) for w in range(k)] == [total // k] * k

    for n in (4, 8, 16, 32):
        g = chain_graph("rev8", n)
        pg = materialize(g, recursive_partition(g, 2))
        without = plan_memory(pg)
        with_deps = plan_memory(insert_control_deps(pg, g))
        assert all(w.buffers >= n for w in without.workers)
        assert all(w.buffers <= 2 for w in with_deps.workers)


def test_criterion_8_scale():
    g = load_graph(resnet(blocks=100))
    assert len(g.ops) >= 1500
    start = time.perf_counter()
    plan = recursive_partition(g, 8)
    elapsed = time.perf_counter() - start
    assert len(plan.steps) == 3
    assert elapsed < 60, elapsed


def test_criterion_9_simulator_consistency():
    fixtures = {"matmul": matmul_graph(8), "mlp": mlp(), "residual": residual_block(),
                "rnn": rnn(), "conv": conv_group()}
    mismatches = []
    for name, spec in fixtures.items():
        g = load_graph(spec)
        for k in (2, 4, 8):
            plan = recursive_partition(g, k)
            pg = insert_control_deps(materialize(g, plan), g)
            report = simulate(pg, plan, Topology.uniform([k], [1.0]))
            if report.total_bytes != plan.total_cost:
                mismatches.append((name, k, report.total_bytes, plan.total_cost))
    assert mismatches == [], mismatches
