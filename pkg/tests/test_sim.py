import pytest

from tdlpart import errors
from tdlpart.graph import load_graph
from tdlpart.materialize import insert_control_deps, materialize, plan_memory
from tdlpart.models import conv_group, matmul_graph, mlp, residual_block
from tdlpart.planner import RecursivePlan, recursive_partition, sequence_cost
from tdlpart.sim import Topology, simulate, weighted_time

TWO_LEVEL = Topology.from_json({"levels": [{"fanout": 2, "bandwidth": 1},
                                           {"fanout": 2, "bandwidth": 10}]})


def _run(g, plan, topo):
    pg = insert_control_deps(materialize(g, plan), g)
    return simulate(pg, plan, topo, plan_memory(pg))


def test_weighted_time_example():
    assert weighted_time([100, 300], TWO_LEVEL) == pytest.approx(130.0)


def test_matmul_two_workers_matches_plan():
    g = load_graph(matmul_graph(8))
    report = _run(g, recursive_partition(g, 2), Topology.uniform([2], [1e9]))
    assert report.total_bytes == report.plan_total_cost == 256
    assert sum(report.link_bytes.values()) == sum(report.step_bytes)


def test_zero_communication_report():
    g = load_graph({"tensors": {"a": {"shape": [4, 4], "role": "input"},
                                "b": {"shape": [4, 4], "role": "activation"}},
                    "ops": {"s": {"def": "scale", "inputs": ["a"], "output": "b"}}})
    report = _run(g, recursive_partition(g, 2), Topology.uniform([2], [1.0]))
    assert report.total_bytes == 0 and report.time == 0
    assert report.step_bytes == [0] and report.link_bytes == {}


@pytest.mark.parametrize("spec", [mlp(), residual_block(), matmul_graph(8), conv_group()],
                         ids=["mlp", "residual", "matmul", "conv"])
def test_recursive_order_beats_reverse(spec):
    g = load_graph(spec)
    plan = recursive_partition(g, 4)
    deltas, total = sequence_cost(g, plan.steps[::-1])
    reverse = RecursivePlan(4, plan.factors[::-1], plan.steps[::-1], deltas, total)
    assert _run(g, plan, TWO_LEVEL).time <= _run(g, reverse, TWO_LEVEL).time


@pytest.mark.parametrize("levels", [
    [{"fanout": 2, "bandwidth": 10}, {"fanout": 2, "bandwidth": 1}],
    [{"fanout": 0, "bandwidth": 1}],
    [{"fanout": 2, "bandwidth": -1}],
    [{"fanout": 2}],
    [],
])
def test_invalid_topologies(levels):
    with pytest.raises(errors.TopologyMismatch):
        Topology.from_json({"levels": levels})


def test_worker_count_mismatch():
    g = load_graph(matmul_graph(8))
    with pytest.raises(errors.TopologyMismatch):
        _run(g, recursive_partition(g, 2), TWO_LEVEL)
