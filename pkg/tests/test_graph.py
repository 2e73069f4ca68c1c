import copy

import pytest

from tdlpart import errors
from tdlpart.graph import coarsen, graph_from_dict, cut_states, graph_to_dot, load_graph, serialize
from tdlpart.models import GraphBuilder, conv_group, mlp, resnet, rnn, sgd_chain

SCALE = {"tensors": {"a": {"shape": [2, 2], "role": "input"},
                     "x": {"shape": [2, 2], "role": "activation"}},
         "ops": {"o": {"def": "scale", "inputs": ["a"], "output": "x"}}}


def _mutated(**changes):
    data = copy.deepcopy(SCALE)
    for path, value in changes.items():
        node = data
        keys = path.split("__")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return data


@pytest.mark.parametrize("data, exc", [
    (_mutated(tensors__x__shape=[2, 3]), errors.ShapeMismatch),
    (_mutated(ops__o__def="zzz"), errors.UnknownOperator),
    (_mutated(ops__o__output="nope"), errors.SchemaError),
    (_mutated(tensors__a__shape=[0, 2]), errors.SchemaError),
    (_mutated(tensors__a__role="bogus"), errors.SchemaError),
    ({"tensors": {}}, errors.SchemaError),
])
def test_validation(data, exc):
    with pytest.raises(exc):
        load_graph(data)


def test_non_object_graph_rejected():
    with pytest.raises(errors.SchemaError):
        graph_from_dict([])


def test_cycle_detected():
    data = _mutated(ops__p={"def": "scale", "inputs": ["x"], "output": "a"})
    data["tensors"]["a"]["role"] = "activation"
    with pytest.raises(errors.CycleDetected):
        load_graph(data)


def test_serialize_round_trip():
    spec = mlp(with_update=True)
    g = load_graph(spec)
    assert serialize(load_graph(serialize(g))) == serialize(g)
    assert "digraph" in graph_to_dot(g)


def _groups(spec):
    return [(grp.kind, sorted(grp.ops) if grp.kind == "op" else sorted(grp.tensors))
            for grp in coarsen(load_graph(spec)).groups]


def test_backward_ops_join_forward_groups():
    groups = _groups(mlp())
    assert ("op", ["fc1", "fc1_bwd_w", "fc1_bwd_x"]) in groups
    assert ("tensor", ["W1", "dW1"]) in groups
    assert [k for k, _ in groups].count("op") == 4


def test_timesteps_merge():
    groups = _groups(rnn(steps=3))
    assert ("op", ["rec1", "rec2", "rec3"]) in groups
    assert ("tensor", ["h0", "h1", "h2", "h3"]) in groups


def test_elementwise_chain_coalesces():
    ops = [g for k, g in _groups(sgd_chain(length=5)) if k == "op"]
    assert ops == [["opt0", "opt1", "opt2", "opt3", "opt4"]]


def test_weight_updates_attach_to_weight_group():
    groups = _groups(mlp(with_update=True))
    assert ("tensor", ["W1", "W1_new", "dW1"]) in groups


def test_disconnected_graph_is_not_linear():
    b = GraphBuilder()
    for name in ("a", "c"):
        b.tensor(name, [2, 2], "input")
    b.op("o1", "scale", ["a"], b.tensor("x", [2, 2]))
    b.op("o2", "scale", ["c"], b.tensor("y", [2, 2]))
    with pytest.raises(errors.NotLinear):
        coarsen(load_graph(b.build()))


def test_resnet_coarsens_to_short_cuts():
    cg = coarsen(load_graph(resnet(blocks=3)))
    widths = [len(cut_states(cg, c, ways=2)) for c in range(len(cg.groups) - 1)]
    assert max(widths) <= 4 ** 4


def test_cut_limit():
    cg = coarsen(load_graph(conv_group()))
    with pytest.raises(errors.CutTooWide):
        cut_states(cg, 1, ways=2, limit=1)
