import json
import random

import pytest

from helpers import random_basic_plan, random_graph_spec
from tdlpart import errors
from tdlpart.graph import coarsen, load_graph
from tdlpart.models import conv_group, matmul_graph, mlp, residual_block, rnn, sgd_chain
from tdlpart.planner import (brute_force_oracle, dp_partition, factorize_workers, make_plan, plan_from_json,
                             recursive_partition, sequence_cost)

MM = load_graph(matmul_graph(8))


def test_matmul_plan_costs():
    concat = make_plan(MM, 2, {"A": 0, "B": 0, "C": 0}, {"mm": "i"})
    # each worker fetches the half of B it does not hold: 2 * 32 elements
    assert concat.cost == 256
    reduce = make_plan(MM, 2, {"A": 1, "B": 0, "C": 0}, {"mm": "k"})
    # operands aligned with k; each worker ships the 32 partial sums it does not own
    assert reduce.cost == 256
    misaligned = make_plan(MM, 2, {"A": 0, "B": 0, "C": 1}, {"mm": "k"})
    # as above, plus each worker fetches the 2 * 4 * 4 elements of A it lacks
    assert misaligned.cost == 384


@pytest.mark.parametrize("k, total", [(2, 256), (4, 512), (8, 768)])
def test_matmul_recursive_totals(k, total):
    plan = recursive_partition(MM, k)
    assert plan.total_cost == total
    assert plan.total_cost == brute_force_oracle(MM, k).total_cost


@pytest.mark.parametrize("spec", [mlp(), residual_block(), rnn(), conv_group()],
                         ids=["mlp", "residual", "rnn", "conv"])
def test_dp_matches_oracle(spec):
    g = load_graph(spec)
    best = brute_force_oracle(g, 4, max_size=10 ** 8)
    assert recursive_partition(g, 4).total_cost == best.total_cost


def test_factorization():
    assert factorize_workers(8) == [2, 2, 2]
    assert factorize_workers(12) == [3, 2, 2]
    assert factorize_workers(7) == [7]


def test_step_costs_are_scaled_by_previous_ways():
    plan = recursive_partition(MM, 4)
    assert sequence_cost(MM, plan.steps) == (plan.step_costs, plan.total_cost)
    assert plan.step_costs[1] == 2 * plan.steps[1].cost


def test_plan_json_round_trip():
    g = load_graph(mlp())
    plan = recursive_partition(g, 4)
    again = plan_from_json(g, json.loads(json.dumps(plan.to_json())))
    assert again.to_json() == plan.to_json()


def test_malformed_plan_json():
    with pytest.raises(errors.InconsistentPlan):
        plan_from_json(MM, {"steps": "nope"})


def test_indivisible_shapes():
    with pytest.raises(errors.IndivisibleShape):
        recursive_partition(load_graph(matmul_graph(3)), 2)


def test_oracle_size_guard():
    with pytest.raises(errors.TooLarge):
        brute_force_oracle(load_graph(mlp()), 8, max_size=10)


def test_dp_beats_random_assignments():
    rng = random.Random(11)
    specs = [mlp(), residual_block(), rnn(), sgd_chain()] + [random_graph_spec(rng) for _ in range(5)]
    for spec in specs:
        g = load_graph(spec)
        best = dp_partition(coarsen(g), 2).cost
        assert all(random_basic_plan(g, rng).cost >= best for _ in range(1000))
