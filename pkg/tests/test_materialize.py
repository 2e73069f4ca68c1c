import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain_graph, integer_inputs, random_graph_spec
from tdlpart import errors
from tdlpart.graph import load_graph
from tdlpart.materialize import (PartitionedGraph, insert_control_deps, materialize, plan_memory,
                                 run_partitioned, run_reference, topological_nodes, trivial_plan,
                                 worker_digits)
from tdlpart.models import matmul_graph, mlp
from tdlpart.planner import recursive_partition

MM = load_graph(matmul_graph(8))


def test_worker_digits_are_mixed_radix():
    assert worker_digits(5, [2, 2, 2]) == [1, 0, 1]
    assert worker_digits(4, [3, 2]) == [2, 0]


def test_trivial_plan_has_no_transfers():
    pg = materialize(MM, trivial_plan(MM))
    assert pg.workers == 1
    assert pg.transfers() == [] and pg.total_bytes() == 0


def test_concat_plan_fetches_missing_weight_half():
    pg = materialize(MM, recursive_partition(MM, 2))
    fetches = pg.fetch_nodes(op="mm")
    assert len(fetches) == 2
    assert all(f.remote_elements == 32 for f in fetches)
    assert not pg.reduce_nodes()


def test_control_deps_keep_graph_acyclic():
    for k in (2, 4, 8):
        g = load_graph(mlp())
        pg = insert_control_deps(materialize(g, recursive_partition(g, k)), g)
        order = topological_nodes(pg)
        pos = {n: i for i, n in enumerate(order)}
        assert all(pos[a] < pos[b] for a, b in pg.all_edges())


def test_json_round_trip():
    pg = insert_control_deps(materialize(MM, recursive_partition(MM, 4)), MM)
    again = PartitionedGraph.from_json(json.loads(json.dumps(pg.to_json())))
    assert again.to_json() == pg.to_json()
    assert "digraph" in pg.to_dot()


def test_malformed_partitioned_graph():
    with pytest.raises(errors.InconsistentPlan):
        PartitionedGraph.from_json({"workers": 2})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([2, 4]))
def test_random_fixtures_are_equivalent(seed, k):
    g = load_graph(random_graph_spec(random.Random(seed)))
    try:
        plan = recursive_partition(g, k)
    except errors.IndivisibleShape:
        return
    pg = insert_control_deps(materialize(g, plan), g)
    inputs = integer_inputs(g, seed)
    want, got = run_reference(g, inputs), run_partitioned(pg, g, inputs)
    for t in g.tensors:
        assert np.array_equal(got[t], want[t]), t


def test_delayed_fetch_never_raises_peak():
    g = load_graph(mlp())
    pg = insert_control_deps(materialize(g, recursive_partition(g, 2)), g)
    assert plan_memory(pg, delayed_fetch=True).peak() <= plan_memory(pg, delayed_fetch=False).peak()


def test_chain_buffers_grow_without_control_deps():
    small = plan_memory(materialize(g := chain_graph("rev8", 4), recursive_partition(g, 2)))
    large = plan_memory(materialize(g := chain_graph("rev8", 12), recursive_partition(g, 2)))
    assert large.workers[0].buffers > small.workers[0].buffers


def test_mlp_stored_bytes_halve_and_peak_bound():
    g = load_graph(mlp())
    one = insert_control_deps(materialize(g, trivial_plan(g)), g)
    two = insert_control_deps(materialize(g, recursive_partition(g, 2)), g)
    assert [two.stored_bytes(w) for w in range(2)] == [one.stored_bytes(0) // 2] * 2
    half = plan_memory(one).peak() / 2
    peak = plan_memory(two).peak()
    assert peak <= 1.25 * half
