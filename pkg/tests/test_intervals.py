import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdlpart import errors
from tdlpart.intervals import SymInterval, eval_access, image, slice_symbol
from tdlpart.tdl import Affine, load_corpus

CORPUS = load_corpus()
X = SymInterval.zv("X")
Y = SymInterval.zv("Y")


def test_arithmetic_on_closed_hull():
    assert (X + Y).concretize({"X": 4, "Y": 3}) == (0, 6)
    assert (X * 2).concretize({"X": 5}) == (0, 9)
    assert (X + 3).concretize({"X": 5}) == (3, 8)
    assert (X - Y).concretize({"X": 4, "Y": 3}) == (-2, 4)


def test_half_interval_concretizes_with_ceiling():
    assert SymInterval.zv("X", 0, 0.5).concretize({"X": 9}) == (0, 5)


def test_errors():
    with pytest.raises(errors.NonAffineError):
        X * X
    with pytest.raises(errors.UnboundSymbol):
        X.concretize({})


def test_access_maps():
    acc = eval_access(CORPUS["conv1d"])
    b = {"b": 2, "ci": 3, "x": 8, "dx": 4, "co": 5}
    assert [i.concretize(b) for i in acc["data"]] == [(0, 2), (0, 3), (0, 11)]
    assert [i.concretize(b) for i in acc["filters"]] == [(0, 3), (0, 5), (0, 4)]
    acc = eval_access(CORPUS["transpose"])
    assert [i.concretize({"i": 3, "j": 7}) for i in acc["A"]] == [(0, 7), (0, 3)]


def test_slice_symbol_names_dimension():
    assert slice_symbol("A", 1) != slice_symbol("A", 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=3),
       st.lists(st.integers(1, 6), min_size=3, max_size=3), st.integers(-4, 4))
def test_affine_image_is_exact(coeffs, extents, const):
    names = ["u", "v", "w"][:len(coeffs)]
    index = Affine.make(dict(zip(names, coeffs)), const)
    init = {n: SymInterval.zv(n) for n in names}
    bounds = dict(zip(names, extents))
    lo, hi = image(index, init).concretize(bounds)
    values = [const + sum(c * p for c, p in zip(coeffs, point))
              for point in itertools.product(*(range(bounds[n]) for n in names))]
    assert (lo, hi) == (min(values), max(values) + 1)
