"""Communication-minimising partition search.

A *basic plan* splits every tensor along one dimension ``s`` ways and picks a
strategy for every op.  Its cost counts, for each op and each worker, the
input elements the worker must read but does not store, plus the output
elements it produces but does not own.  Costs are evaluated on the current
per-worker shapes, so a plan for ``k = k1 * k2 * ...`` workers is a sequence of
basic plans where step ``i`` is charged ``k1 * ... * k(i-1)`` times.

The search runs dynamic programming over the coarsened chain (variable
elimination over tensor split choices), once per factor of ``k``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CutTooWide,
    IncompletePlan,
    IndivisibleShape,
    InconsistentPlan,
    NoStrategy,
    ShapeMismatch,
    TooLarge,
)
from .graph import DEFAULT_CUT_LIMIT, CoarsenedGraph, DataflowGraph, coarsen
from .interp import infer_extents
from .strategies import (
    PartitionStrategy,
    _exact_dims,
    discover_strategies,
    slice_bounds,
)
from .intervals import slice_symbol
from .tdl import OperatorDef

ELEMENT_BYTES = 4
Shapes = dict[str, tuple[int, ...]]


@lru_cache(maxsize=None)
def strategies_for(d: OperatorDef, ways: int) -> tuple[PartitionStrategy, ...]:
    return tuple(discover_strategies(d, ways))


@lru_cache(maxsize=None)
def _exact(d: OperatorDef) -> dict[str, list[Optional[str]]]:
    return _exact_dims(d)


def factorize_workers(k: int) -> list[int]:
    """Prime factors of ``k`` in non-increasing order."""
    if k < 2:
        raise ValueError("worker count must be at least 2")
    factors = []
    n, p = k, 2
    while p * p <= n:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    if n > 1:
        factors.append(n)
    return sorted(factors, reverse=True)


@dataclass(frozen=True)
class BasicPlan:
    ways: int
    tensor_dims: Mapping[str, int]
    op_strategies: Mapping[str, PartitionStrategy]
    cost: int  # bytes, on the shapes the plan was made for

    def to_json(self) -> dict:
        return {
            "ways": self.ways,
            "tensor_dims": dict(sorted(self.tensor_dims.items())),
            "op_strategies": {o: {"split_dim": s.split_dim, "kind": s.kind}
                              for o, s in sorted(self.op_strategies.items())},
            "cost": self.cost,
        }


@dataclass
class RecursivePlan:
    workers: int
    factors: list[int]
    steps: list[BasicPlan]
    step_costs: list[int]
    total_cost: int
    stats: list[list[int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "workers": self.workers,
            "factors": list(self.factors),
            "steps": [s.to_json() for s in self.steps],
            "step_costs": list(self.step_costs),
            "total_cost": self.total_cost,
        }


@dataclass(frozen=True)
class CostVector:
    """Per-tensor coefficients: ``cost = sum(alpha[t] * size[t])``."""

    alpha: Mapping[str, float]

    def evaluate(self, sizes: Mapping[str, int]) -> float:
        return sum(a * sizes[t] for t, a in self.alpha.items())


# ---------------------------------------------------------------------------
# Shapes and per-op cost vectors

def initial_shapes(g: DataflowGraph) -> Shapes:
    return {t: n.shape for t, n in g.tensors.items()}


def apply_split(shapes: Mapping[str, tuple[int, ...]], tensor_dims: Mapping[str, int],
                ways: int) -> Shapes:
    """Per-worker shapes after splitting each tensor along its chosen dimension."""
    out = {}
    for t, shape in shapes.items():
        d = tensor_dims[t]
        s = list(shape)
        s[d] = math.ceil(s[d] / ways)
        out[t] = tuple(s)
    return out


def _op_extents(g: DataflowGraph, op_id: str, shapes: Mapping[str, tuple[int, ...]]) -> dict[str, int]:
    op = g.ops[op_id]
    d = g.op_def(op_id)
    ins = {p: shapes[t] for p, t in zip(d.param_names, op.inputs)}
    return infer_extents(d, ins, shapes[op.output])


def _input_vector(d: OperatorDef, strat: PartitionStrategy, param: str,
                  shape: tuple[int, ...], ext: Mapping[str, int]) -> np.ndarray:
    bounds = dict(ext)
    for axis, v in enumerate(_exact(d)[param]):
        if v is not None:
            bounds[v] = shape[axis]
    for axis, n in enumerate(shape):
        bounds[slice_symbol(param, axis)] = n
    vec = np.zeros(len(shape), dtype=np.int64)
    for j in range(strat.ways):
        rng = []
        for iv, n in zip(strat.input_intervals(param, j), shape):
            lo, hi = iv.concretize(bounds)
            lo, hi = max(lo, 0), min(hi, n)
            rng.append((lo, max(lo, hi)))
        size = math.prod(hi - lo for lo, hi in rng)
        if size == 0:
            continue
        for axis, n in enumerate(shape):
            slo, shi = slice_bounds(j, strat.ways, n)
            lo, hi = rng[axis]
            inside = max(0, min(hi, shi) - max(lo, slo))
            vec[axis] += size - (size // (hi - lo)) * inside
    return vec


def _output_vector(strat: PartitionStrategy, shape: tuple[int, ...]) -> np.ndarray:
    vec = np.zeros(len(shape), dtype=np.int64)
    for j in range(strat.ways):
        rng = [slice_bounds(j, strat.ways, n) if a == strat.out_axis else (0, n)
               for a, n in enumerate(shape)]
        size = math.prod(hi - lo for lo, hi in rng)
        if size == 0:
            continue
        for axis, n in enumerate(shape):
            slo, shi = slice_bounds(j, strat.ways, n)
            lo, hi = rng[axis]
            inside = max(0, min(hi, shi) - max(lo, slo))
            vec[axis] += size - (size // (hi - lo)) * inside
    return vec


@dataclass
class _OpModel:
    op: str
    tensors: list[str]  # one entry per slot; inputs then output
    strategies: list[PartitionStrategy]
    vectors: list[list[np.ndarray]]  # [strategy][slot] -> cost per tensor dim


def _op_model(g: DataflowGraph, op_id: str, shapes: Mapping[str, tuple[int, ...]],
              ways: int, mask: bool = True) -> _OpModel:
    op = g.ops[op_id]
    d = g.op_def(op_id)
    ext = _op_extents(g, op_id, shapes)
    strategies = [s for s in strategies_for(d, ways)
                  if not mask or ext[s.split_dim] % ways == 0]
    if not strategies:
        raise NoStrategy(f"op {op_id}: no strategy splits evenly {ways} ways "
                         f"(index extents {ext})")
    tensors = [*op.inputs, op.output]
    vectors = []
    for s in strategies:
        vecs = [_input_vector(d, s, p, shapes[t], ext) for p, t in zip(d.param_names, op.inputs)]
        vecs.append(_output_vector(s, shapes[op.output]))
        vectors.append(vecs)
    return _OpModel(op_id, tensors, strategies, vectors)


# ---------------------------------------------------------------------------
# Step model: variables are tie classes of tensors

@dataclass
class _StepModel:
    ways: int
    var_of: dict[str, str]  # tensor -> tie representative
    domains: dict[str, list[int]]  # tie representative -> allowed dims
    ops: dict[str, _OpModel]

    def op_table(self, op: str, axes: Sequence[str]) -> np.ndarray:
        """Cost of ``op`` as an array over ``axes`` (minimum over its strategies)."""
        m = self.ops[op]
        pos = {v: i for i, v in enumerate(axes)}
        best = None
        for vecs in m.vectors:
            total = np.zeros([1] * len(axes), dtype=np.int64)
            for t, vec in zip(m.tensors, vecs):
                v = self.var_of[t]
                shape = [1] * len(axes)
                shape[pos[v]] = len(self.domains[v])
                total = total + vec[self.domains[v]].reshape(shape)
            best = total if best is None else np.minimum(best, total)
        return best

    def best_strategy(self, op: str, dims: Mapping[str, int]) -> tuple[PartitionStrategy, int]:
        m = self.ops[op]
        costs = [sum(int(vec[dims[t]]) for t, vec in zip(m.tensors, vecs)) for vecs in m.vectors]
        i = int(np.argmin(costs))
        return m.strategies[i], costs[i]


def _step_model(g: DataflowGraph, cg: CoarsenedGraph, shapes: Mapping[str, tuple[int, ...]],
                ways: int, cache: Optional[dict] = None) -> _StepModel:
    members = cg.tie_classes()
    domains = {}
    for rep, ts in members.items():
        ranks = {len(shapes[t]) for t in ts}
        if len(ranks) != 1:
            raise ShapeMismatch(f"tensors {sorted(ts)} must share a split dimension but differ in rank")
        rank = ranks.pop()
        dims = [a for a in range(rank) if all(shapes[t][a] % ways == 0 for t in ts)]
        if not dims:
            raise IndivisibleShape(
                f"no dimension of {rep} (shape {shapes[rep]}) divides evenly by {ways}")
        domains[rep] = dims
    ops = {}
    for o in g.ops:
        key = None
        if cache is not None:
            op = g.ops[o]
            key = (o, ways, tuple(shapes[t] for t in (*op.inputs, op.output)))
            if key in cache:
                ops[o] = cache[key]
                continue
        ops[o] = _op_model(g, o, shapes, ways)
        if key is not None:
            cache[key] = ops[o]
    return _StepModel(ways, dict(cg.ties), domains, ops)


def _var_spans(cg: CoarsenedGraph) -> dict[str, tuple[int, int]]:
    spans: dict[str, tuple[int, int]] = {}
    for t in cg.graph.tensors:
        pos = cg.touch_positions(t)
        rep = cg.ties[t]
        lo, hi = spans.get(rep, (pos[0], pos[-1]))
        spans[rep] = (min(lo, pos[0]), max(hi, pos[-1]))
    return spans


def _build_plan(g: DataflowGraph, model: _StepModel, dims_by_var: Mapping[str, int],
                shapes: Mapping[str, tuple[int, ...]]) -> BasicPlan:
    tensor_dims = {t: dims_by_var[model.var_of[t]] for t in g.tensors}
    strategies = {}
    total = 0
    for o in g.ops:
        s, c = model.best_strategy(o, tensor_dims)
        strategies[o] = s
        total += c
    return BasicPlan(model.ways, tensor_dims, strategies, total * ELEMENT_BYTES)


# ---------------------------------------------------------------------------
# Dynamic programming for one step

def _dp(g: DataflowGraph, cg: CoarsenedGraph, model: _StepModel,
        limit: int = DEFAULT_CUT_LIMIT) -> tuple[dict[str, int], int, list[int]]:
    spans = _var_spans(cg)
    starts: dict[int, list[str]] = {}
    ends: dict[int, list[str]] = {}
    for v in sorted(spans, key=lambda v: (spans[v], v)):
        starts.setdefault(spans[v][0], []).append(v)
        ends.setdefault(spans[v][1], []).append(v)
    live: list[str] = []
    frontier = np.zeros((), dtype=np.int64)
    trace = []
    stats = []
    for p, grp in enumerate(cg.groups):
        for v in starts.get(p, ()):
            live.append(v)
            n = len(model.domains[v])
            frontier = np.broadcast_to(frontier[..., None], frontier.shape + (n,))
        states = math.prod(len(model.domains[v]) for v in live)
        if states > limit:
            raise CutTooWide(
                f"{len(live)} tensors are live at {grp.label}: {states} joint states exceed "
                f"the limit of {limit}")
        stats.append(states)
        for o in grp.ops:
            frontier = frontier + model.op_table(o, live)
        frontier = np.broadcast_to(frontier, tuple(len(model.domains[v]) for v in live))
        gone = ends.get(p, [])
        if gone:
            keep = [v for v in live if v not in gone]
            order = [live.index(v) for v in keep] + [live.index(v) for v in gone]
            arr = np.transpose(frontier, order)
            arr = arr.reshape(arr.shape[: len(keep)] + (-1,))
            arg = np.argmin(arr, axis=-1)
            frontier = np.take_along_axis(arr, arg[..., None], axis=-1)[..., 0]
            trace.append((tuple(keep), tuple(gone), arg))
            live = keep
    assignment: dict[str, int] = {}
    for keep, gone, arg in reversed(trace):
        idx = tuple(assignment[v] for v in keep)
        flat = int(arg[idx])
        sub = np.unravel_index(flat, tuple(len(model.domains[v]) for v in gone))
        for v, i in zip(gone, sub):
            assignment[v] = int(i)
    dims = {v: model.domains[v][i] for v, i in assignment.items()}
    return dims, int(frontier), stats


def dp_partition(cg: CoarsenedGraph, ways: int = 2,
                 shapes: Optional[Mapping[str, tuple[int, ...]]] = None,
                 limit: int = DEFAULT_CUT_LIMIT,
                 stats: Optional[list] = None) -> BasicPlan:
    """Minimum-cost basic plan for an even ``ways``-way split."""
    g = cg.graph
    shapes = dict(shapes or initial_shapes(g))
    model = _step_model(g, cg, shapes, ways)
    dims, _, counts = _dp(g, cg, model, limit)
    if stats is not None:
        stats.append(counts)
    return _build_plan(g, model, dims, shapes)


def recursive_partition(g: DataflowGraph, workers: int,
                        cg: Optional[CoarsenedGraph] = None,
                        limit: int = DEFAULT_CUT_LIMIT) -> RecursivePlan:
    """Partition for ``workers`` by one DP pass per prime factor."""
    cg = cg or coarsen(g)
    factors = factorize_workers(workers)
    shapes = initial_shapes(g)
    steps, deltas, stats = [], [], []
    multiplier = 1
    for k in factors:
        plan = dp_partition(cg, k, shapes, limit, stats)
        steps.append(plan)
        deltas.append(multiplier * plan.cost)
        shapes = apply_split(shapes, plan.tensor_dims, k)
        multiplier *= k
    return RecursivePlan(workers, factors, steps, deltas, sum(deltas), stats)


# ---------------------------------------------------------------------------
# Evaluating given plans

def plan_cost(g: DataflowGraph, plan: BasicPlan,
              shapes: Optional[Mapping[str, tuple[int, ...]]] = None) -> int:
    """Bytes moved by ``plan`` on ``shapes`` (default: the graph's shapes)."""
    return sum(op_costs(g, plan, shapes).values()) * ELEMENT_BYTES


def op_costs(g: DataflowGraph, plan: BasicPlan,
             shapes: Optional[Mapping[str, tuple[int, ...]]] = None) -> dict[str, int]:
    """Elements moved per op."""
    _check_complete(g, plan)
    shapes = dict(shapes or initial_shapes(g))
    out = {}
    for o in g.ops:
        model = _op_model(g, o, shapes, plan.ways, mask=False)
        s = plan.op_strategies[o]
        idx = next((i for i, c in enumerate(model.strategies) if c.split_dim == s.split_dim), None)
        if idx is None:
            raise InconsistentPlan(f"op {o}: {s.split_dim} is not a strategy of {g.ops[o].def_name}")
        out[o] = sum(int(vec[plan.tensor_dims[t]])
                     for t, vec in zip(model.tensors, model.vectors[idx]))
    return out


def tensor_costs(g: DataflowGraph, plan: BasicPlan,
                 shapes: Optional[Mapping[str, tuple[int, ...]]] = None) -> dict[str, int]:
    """Elements moved, attributed to the tensor being moved."""
    _check_complete(g, plan)
    shapes = dict(shapes or initial_shapes(g))
    out = {t: 0 for t in g.tensors}
    for o in g.ops:
        model = _op_model(g, o, shapes, plan.ways, mask=False)
        s = plan.op_strategies[o]
        idx = next(i for i, c in enumerate(model.strategies) if c.split_dim == s.split_dim)
        for t, vec in zip(model.tensors, model.vectors[idx]):
            out[t] += int(vec[plan.tensor_dims[t]])
    return out


def cost_vector(g: DataflowGraph, plan: BasicPlan,
                shapes: Optional[Mapping[str, tuple[int, ...]]] = None) -> CostVector:
    """Coefficients expressing ``plan_cost`` as a weighted sum of tensor sizes."""
    shapes = dict(shapes or initial_shapes(g))
    per = tensor_costs(g, plan, shapes)
    return CostVector({t: ELEMENT_BYTES * c / math.prod(shapes[t]) for t, c in per.items()})


def sequence_cost(g: DataflowGraph, steps: Sequence[BasicPlan]) -> tuple[list[int], int]:
    """Step costs and total of applying ``steps`` in order."""
    shapes = initial_shapes(g)
    deltas = []
    mult = 1
    for p in steps:
        deltas.append(mult * plan_cost(g, p, shapes))
        shapes = apply_split(shapes, p.tensor_dims, p.ways)
        mult *= p.ways
    return deltas, sum(deltas)


def _check_complete(g: DataflowGraph, plan: BasicPlan) -> None:
    missing_t = [t for t in g.tensors if t not in plan.tensor_dims]
    missing_o = [o for o in g.ops if o not in plan.op_strategies]
    if missing_t or missing_o:
        raise IncompletePlan(f"plan lacks tensors {missing_t[:5]} and ops {missing_o[:5]}")
    for t, d in plan.tensor_dims.items():
        if t in g.tensors and not 0 <= d < len(g.tensors[t].shape):
            raise InconsistentPlan(f"tensor {t}: split dimension {d} out of range")


def make_plan(g: DataflowGraph, ways: int, tensor_dims: Mapping[str, int],
              op_split: Mapping[str, str],
              shapes: Optional[Mapping[str, tuple[int, ...]]] = None) -> BasicPlan:
    """Build a plan from tensor dims and per-op split variables."""
    strategies = {}
    for o, v in op_split.items():
        if o not in g.ops:
            raise InconsistentPlan(f"unknown op {o!r}")
        match = [s for s in strategies_for(g.op_def(o), ways) if s.split_dim == v]
        if not match:
            raise InconsistentPlan(f"op {o}: no strategy splits {v!r}")
        strategies[o] = match[0]
    draft = BasicPlan(ways, dict(tensor_dims), strategies, 0)
    return BasicPlan(ways, dict(tensor_dims), strategies, plan_cost(g, draft, shapes))


def plan_from_json(g: DataflowGraph, data: Mapping) -> RecursivePlan:
    try:
        raw_steps = data["steps"]
        steps = []
        shapes = initial_shapes(g)
        for st in raw_steps:
            ways = int(st["ways"])
            split = {o: s["split_dim"] for o, s in st["op_strategies"].items()}
            dims = {t: int(d) for t, d in st["tensor_dims"].items()}
            p = make_plan(g, ways, dims, split, shapes)
            steps.append(p)
            shapes = apply_split(shapes, dims, ways)
    except (KeyError, TypeError, ValueError) as e:
        raise InconsistentPlan(f"malformed plan: {e}") from None
    deltas, total = sequence_cost(g, steps)
    workers = math.prod(p.ways for p in steps)
    if "workers" in data and int(data["workers"]) != workers:
        raise InconsistentPlan(f"plan declares {data['workers']} workers but its steps give {workers}")
    return RecursivePlan(workers, [p.ways for p in steps], steps, deltas, total)


# ---------------------------------------------------------------------------
# Exhaustive oracle

def _joint(model: _StepModel, order: Sequence[str], ops: Iterable[str]) -> np.ndarray:
    total = np.zeros([len(model.domains[v]) for v in order], dtype=np.int64)
    for o in ops:
        total = total + model.op_table(o, order)
    return total


def brute_force_oracle(g: DataflowGraph, workers: int, max_size: int = 2_000_000,
                       factors: Optional[Sequence[int]] = None) -> RecursivePlan:
    """Exhaustive search over every sequence of basic plans (same plan space as the DP)."""
    cg = coarsen(g)
    factors = list(factors or factorize_workers(workers))
    order = sorted(set(cg.ties.values()))
    ranks = [len(g.tensors[v].shape) for v in order]
    bound = math.prod(math.prod(ranks) for _ in factors)
    if bound > max_size:
        raise TooLarge(f"oracle would enumerate up to {bound} plans (limit {max_size})")
    cache: dict = {}

    def search(step: int, shapes: Shapes) -> tuple[int, list[dict[str, int]]]:
        ways = factors[step]
        model = _step_model(g, cg, shapes, ways, cache)
        joint = _joint(model, order, g.ops)
        mult = math.prod(factors[:step])
        if step == len(factors) - 1:
            flat = int(np.argmin(joint))
            idx = np.unravel_index(flat, joint.shape)
            dims = {v: model.domains[v][i] for v, i in zip(order, idx)}
            return mult * int(joint[idx]), [dims]
        best: Optional[tuple[int, list]] = None
        for idx in itertools.product(*(range(n) for n in joint.shape)):
            here = mult * int(joint[idx])
            if best is not None and here >= best[0]:
                continue
            dims = {v: model.domains[v][i] for v, i in zip(order, idx)}
            nxt = apply_split(shapes, {t: dims[cg.ties[t]] for t in g.tensors}, ways)
            rest, seq = search(step + 1, nxt)
            if best is None or here + rest < best[0]:
                best = (here + rest, [dims] + seq)
        assert best is not None
        return best

    _, seq = search(0, initial_shapes(g))
    shapes = initial_shapes(g)
    steps = []
    for ways, dims in zip(factors, seq):
        model = _step_model(g, cg, shapes, ways, cache)
        plan = _build_plan(g, model, dims, shapes)
        steps.append(plan)
        shapes = apply_split(shapes, plan.tensor_dims, ways)
    deltas, total = sequence_cost(g, steps)
    return RecursivePlan(workers, factors, steps, deltas, total)
