import pytest

from tdlpart.strategies import (Slice, Whole, count_nd_partitions, discover_strategies,
                                slice_bounds, splittable_vars)
from tdlpart.tdl import load_corpus

CORPUS = load_corpus()


@pytest.mark.parametrize("name, dims", [
    ("conv1d", ["b", "co", "x", "ci", "dx"]),
    ("matmul", ["i", "j", "k"]),
    ("batch_cholesky", ["b"]),
    ("batch_inverse", ["b"]),
    ("add", ["i", "j"]),
])
def test_strategy_dimensions(name, dims):
    assert [s.split_dim for s in discover_strategies(CORPUS[name], 2)] == dims


def test_matmul_strategies():
    by = {s.split_dim: s for s in discover_strategies(CORPUS["matmul"], 2)}
    assert by["i"].kind == "concat" and by["i"].out_axis == 0
    assert by["i"].input_region("A", 1) == (Slice(1, 2), Whole())
    assert by["i"].input_region("B", 1) == (Whole(), Whole())
    assert by["k"].kind == "reduce" and by["k"].reducer == "Sum"
    assert by["k"].input_region("B", 0) == (Slice(0, 2), Whole())


def test_max_reduction_keeps_its_reducer():
    by = {s.split_dim: s for s in discover_strategies(CORPUS["row_max"], 2)}
    assert by["c"].reducer == "Max"


def test_opaque_dimensions_are_not_splittable():
    assert splittable_vars(CORPUS["batch_cholesky"]) == ("b",)


def test_three_way_strategies():
    strategies = discover_strategies(CORPUS["matmul"], 3)
    assert all(s.ways == 3 for s in strategies)
    assert strategies[0].input_region("A", 2) == (Slice(2, 3), Whole())


def test_count_nd_partitions():
    assert count_nd_partitions(4, 3) == 20
    assert count_nd_partitions(2, 1) == 2
    assert count_nd_partitions(1, 5) == 1


def test_slice_bounds_cover_and_use_ceiling():
    assert [slice_bounds(p, 3, 8) for p in range(3)] == [(0, 3), (3, 6), (6, 8)]
    assert [slice_bounds(p, 2, 8) for p in range(2)] == [(0, 4), (4, 8)]


def test_strategy_json_is_structured():
    data = discover_strategies(CORPUS["conv1d"], 2)[2].to_json()
    assert data["split_dim"] == "x"
    assert data["inputs"][0]["dims"][2]["kind"] == "halo"
