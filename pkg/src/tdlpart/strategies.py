"""Discovery of single-dimension partition-n-reduce strategies.

Splitting an output index variable ``s`` ways gives a *concat* strategy: each
worker computes one slice of the output.  Splitting a reduction variable gives
a *reduce* strategy: each worker produces a full-size partial result and the
partials are combined with the operator's reducer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence, Union

from .errors import NoStrategy
from .intervals import SymInterval, eval_access, slice_symbol
from .tdl import OpaqueBatched, OpaqueCall, OperatorDef, TensorAccess, classify, walk


@dataclass(frozen=True)
class Whole:
    def to_json(self) -> dict:
        return {"kind": "whole"}


@dataclass(frozen=True)
class Slice:
    part: int
    ways: int

    def to_json(self) -> dict:
        return {"kind": "slice", "part": self.part, "ways": self.ways}


@dataclass(frozen=True)
class HaloSlice:
    interval: SymInterval

    def to_json(self) -> dict:
        return {"kind": "halo", "interval": self.interval.to_json()}


DimRegion = Union[Whole, Slice, HaloSlice]
RegionSpec = tuple[DimRegion, ...]


def slice_bounds(part: int, ways: int, size: int) -> tuple[int, int]:
    """Half-open coordinates of part ``part`` of an even ``ways``-way split."""
    return math.ceil(part * size / ways), math.ceil((part + 1) * size / ways)


def dim_range(region: DimRegion, size: int,
              bounds: Optional[Mapping[str, int]] = None) -> tuple[int, int]:
    """Concrete half-open range of one region dimension, clipped to ``[0, size)``."""
    if isinstance(region, Whole):
        return 0, size
    if isinstance(region, Slice):
        return slice_bounds(region.part, region.ways, size)
    lo, hi = region.interval.concretize(bounds or {})
    lo, hi = max(lo, 0), min(hi, size)
    return lo, max(lo, hi)


def region_ranges(spec: RegionSpec, shape: Sequence[int],
                  bounds: Optional[Mapping[str, int]] = None) -> list[tuple[int, int]]:
    return [dim_range(r, n, bounds) for r, n in zip(spec, shape)]


def box_size(ranges: Sequence[tuple[int, int]]) -> int:
    return math.prod(max(0, hi - lo) for lo, hi in ranges)


def intersect(a: Sequence[tuple[int, int]], b: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    return [(max(x0, y0), min(x1, y1)) for (x0, x1), (y0, y1) in zip(a, b)]


def overlap_fraction(required: RegionSpec, stored: RegionSpec, shape: Sequence[int],
                     bounds: Optional[Mapping[str, int]] = None) -> int:
    """Number of elements in ``required`` that also lie in ``stored``."""
    r = region_ranges(required, shape, bounds)
    s = region_ranges(stored, shape, bounds)
    return box_size(intersect(r, s))


def count_nd_partitions(rank: int, splits: int) -> int:
    """Ways to spread ``splits`` binary splits over ``rank`` dimensions."""
    if rank < 1 or splits < 0:
        raise ValueError("rank must be >= 1 and splits >= 0")
    return math.comb(rank + splits - 1, splits)


@dataclass(frozen=True)
class PartitionStrategy:
    op: str
    split_dim: str
    ways: int
    kind: str  # "concat" or "reduce"
    reducer: Optional[str]
    out_axis: Optional[int]  # output dimension split by a concat strategy
    inputs: tuple[tuple[str, tuple[RegionSpec, ...]], ...]
    raw: tuple[tuple[str, tuple[tuple[SymInterval, ...], ...]], ...]
    output_rank: int

    def input_region(self, tensor: str, part: int) -> RegionSpec:
        return dict(self.inputs)[tensor][part]

    def input_intervals(self, tensor: str, part: int) -> tuple[SymInterval, ...]:
        return dict(self.raw)[tensor][part]

    def output_region(self, part: int) -> RegionSpec:
        if self.kind == "concat":
            return tuple(Slice(part, self.ways) if a == self.out_axis else Whole()
                         for a in range(self.output_rank))
        return tuple(Whole() for _ in range(self.output_rank))

    @property
    def has_halo(self) -> bool:
        return any(isinstance(r, HaloSlice)
                   for _, specs in self.inputs for spec in specs for r in spec)

    def to_json(self) -> dict:
        inputs = []
        for tensor, specs in self.inputs:
            dims = []
            for axis in range(len(specs[0])):
                col = [spec[axis] for spec in specs]
                if isinstance(col[0], HaloSlice):
                    dims.append({"kind": "halo",
                                 "intervals": [r.interval.to_json() for r in col]})
                else:
                    dims.append({"kind": col[0].to_json()["kind"]})
            inputs.append({"tensor": tensor, "dims": dims})
        out = {"kind": self.kind}
        if self.kind == "concat":
            out["axis"] = self.out_axis
        else:
            out["reducer"] = self.reducer
        return {"op": self.op, "split_dim": self.split_dim, "ways": self.ways,
                "kind": self.kind, "inputs": inputs, "output": out}


def splittable_vars(d: OperatorDef) -> tuple[str, ...]:
    cls = classify(d)
    if isinstance(cls, OpaqueBatched):
        blocked = set(d.output_vars) - set(cls.dims)
        blocked |= {v for c in d.opaque_calls() for r in c.result for v in r.vars}
        return tuple(v for v in d.output_vars + d.reduce_vars if v not in blocked)
    return d.output_vars + d.reduce_vars


def _exact_dims(d: OperatorDef) -> dict[str, list[Optional[str]]]:
    """Per tensor dimension, the variable it is indexed by if always exactly one."""
    out: dict[str, list[Optional[str]]] = {}
    seen: dict[str, list] = {}
    for node in walk(d.body):
        if isinstance(node, TensorAccess):
            idx = [ix.single_var() for ix in node.indices]
        elif isinstance(node, OpaqueCall):
            idx = [None if s is None else s.single_var() for s in node.slots]
        else:
            continue
        prev = seen.get(node.tensor)
        seen[node.tensor] = idx if prev is None else [
            a if a == b else None for a, b in zip(prev, idx)]
    for name, rank in d.params:
        out[name] = seen.get(name, [None] * rank)
    return out


def discover_strategies(d: OperatorDef, ways: int = 2) -> list[PartitionStrategy]:
    """All basic strategies of ``d`` for an even ``ways``-way split."""
    if ways < 2:
        raise ValueError("ways must be at least 2")
    vars_ = splittable_vars(d)
    if not vars_:
        raise NoStrategy(f"{d.name}: no partitionable dimension")
    full = eval_access(d)
    exact = _exact_dims(d)
    result = []
    for v in vars_:
        per_part = [eval_access(d, {v: SymInterval.zv(v, Fraction(j, ways), Fraction(j + 1, ways))})
                    for j in range(ways)]
        inputs, raw = [], []
        for name, rank in d.params:
            specs = []
            for j in range(ways):
                spec = []
                for axis in range(rank):
                    iv = per_part[j][name][axis]
                    if iv == full[name][axis]:
                        spec.append(Whole())
                    elif exact[name][axis] == v:
                        spec.append(Slice(j, ways))
                    else:
                        spec.append(HaloSlice(iv))
                specs.append(tuple(spec))
            inputs.append((name, tuple(specs)))
            raw.append((name, tuple(per_part[j][name] for j in range(ways))))
        if v in d.output_vars:
            kind, reducer, axis = "concat", None, d.output_vars.index(v)
        else:
            kind, reducer, axis = "reduce", d.reducer, None
        result.append(PartitionStrategy(d.name, v, ways, kind, reducer, axis,
                                        tuple(inputs), tuple(raw), len(d.output_vars)))
    return result


def symbol_bounds(d: OperatorDef, input_shapes: Mapping[str, Sequence[int]],
                  extents: Mapping[str, int]) -> dict[str, int]:
    """Concrete values for every symbol used by the intervals of ``d``."""
    bounds = dict(extents)
    for name, shape in input_shapes.items():
        for k, n in enumerate(shape):
            bounds[slice_symbol(name, k)] = int(n)
    return bounds


def worker_var_ranges(strategy: PartitionStrategy, extents: Mapping[str, int],
                      part: int) -> dict[str, tuple[int, int]]:
    ranges = {v: (0, n) for v, n in extents.items()}
    ranges[strategy.split_dim] = slice_bounds(part, strategy.ways, extents[strategy.split_dim])
    return ranges
