"""Dataflow graphs of TDL operators, and coarsening into an ordered chain of groups."""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .errors import (
    CutTooWide,
    CycleDetected,
    NotLinear,
    SchemaError,
    ShapeMismatch,
    UnconcretizableShape,
    UnknownOperator,
)
from .interp import infer_extents
from .tdl import OperatorDef, TdlProgram, is_elementwise, load_corpus

ROLES = ("weight", "activation", "gradient", "input", "extra_input")
DEFAULT_CUT_LIMIT = 10**6


@dataclass(frozen=True)
class TensorNode:
    id: str
    shape: tuple[int, ...]
    role: str = "activation"
    grad_of: Optional[str] = None
    timestep: Optional[tuple[str, int]] = None


@dataclass(frozen=True)
class OpNode:
    id: str
    def_name: str
    inputs: tuple[str, ...]
    output: str
    backward_of: Optional[str] = None
    timestep: Optional[tuple[str, int]] = None


@dataclass
class DataflowGraph:
    tensors: dict[str, TensorNode]
    ops: dict[str, OpNode]
    program: TdlProgram
    topo_order: list[str] = field(default_factory=list)

    def op_def(self, op_id: str) -> OperatorDef:
        return self.program[self.ops[op_id].def_name]

    def producer(self) -> dict[str, str]:
        return {op.output: op.id for op in self.ops.values()}

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for op in self.ops.values():
            for t in dict.fromkeys(op.inputs):
                out[t].append(op.id)
        return out

    def extents(self, op_id: str) -> dict[str, int]:
        """Concrete extent of every index variable of an op."""
        op = self.ops[op_id]
        d = self.op_def(op_id)
        shapes = {p: self.tensors[t].shape for p, t in zip(d.param_names, op.inputs)}
        return infer_extents(d, shapes, self.tensors[op.output].shape)

    def bindings(self, op_id: str) -> dict[str, str]:
        """Operator parameter name to graph tensor id."""
        op = self.ops[op_id]
        return dict(zip(self.op_def(op_id).param_names, op.inputs))


# ---------------------------------------------------------------------------
# Loading and serialisation

def _timestep(value: Any, where: str) -> Optional[tuple[str, int]]:
    if value is None:
        return None
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not isinstance(value[1], int) or isinstance(value[1], bool)):
        raise SchemaError(f"{where}: timestep must be [group id, step index]")
    return str(value[0]), int(value[1])


def graph_from_dict(data: Mapping[str, Any], program: Optional[TdlProgram] = None) -> DataflowGraph:
    if program is None:
        program = load_corpus()
    if not isinstance(data, Mapping):
        raise SchemaError("graph must be a JSON object")
    unknown = set(data) - {"tensors", "ops"}
    if unknown:
        raise SchemaError(f"unexpected top-level keys: {sorted(unknown)}")
    missing = {"tensors", "ops"} - set(data)
    if missing:
        raise SchemaError(f"missing top-level keys: {sorted(missing)}")
    raw_t = data["tensors"]
    raw_o = data["ops"]
    if not isinstance(raw_t, Mapping) or not isinstance(raw_o, Mapping):
        raise SchemaError("'tensors' and 'ops' must be objects")

    tensors: dict[str, TensorNode] = {}
    for tid, spec in raw_t.items():
        if not isinstance(spec, Mapping):
            raise SchemaError(f"tensor {tid}: expected an object")
        extra = set(spec) - {"shape", "role", "grad_of", "timestep"}
        if extra:
            raise SchemaError(f"tensor {tid}: unexpected keys {sorted(extra)}")
        shape = spec.get("shape")
        if (not isinstance(shape, list) or not shape
                or not all(isinstance(n, int) and not isinstance(n, bool) for n in shape)):
            raise SchemaError(f"tensor {tid}: shape must be a non-empty list of integers")
        if any(n <= 0 for n in shape):
            raise SchemaError(f"tensor {tid}: shape dimensions must be positive")
        role = spec.get("role", "activation")
        if role not in ROLES:
            raise SchemaError(f"tensor {tid}: unknown role {role!r}")
        grad_of = spec.get("grad_of")
        if grad_of is not None and not isinstance(grad_of, str):
            raise SchemaError(f"tensor {tid}: grad_of must be a tensor id")
        tensors[tid] = TensorNode(tid, tuple(shape), role, grad_of,
                                  _timestep(spec.get("timestep"), f"tensor {tid}"))
    for t in tensors.values():
        if t.grad_of is not None and t.grad_of not in tensors:
            raise SchemaError(f"tensor {t.id}: grad_of refers to unknown tensor {t.grad_of!r}")

    ops: dict[str, OpNode] = {}
    for oid, spec in raw_o.items():
        if not isinstance(spec, Mapping):
            raise SchemaError(f"op {oid}: expected an object")
        extra = set(spec) - {"def", "inputs", "output", "backward_of", "timestep"}
        if extra:
            raise SchemaError(f"op {oid}: unexpected keys {sorted(extra)}")
        if oid in tensors:
            raise SchemaError(f"id {oid!r} names both a tensor and an op")
        name = spec.get("def")
        inputs = spec.get("inputs")
        output = spec.get("output")
        if not isinstance(name, str) or not isinstance(output, str):
            raise SchemaError(f"op {oid}: 'def' and 'output' must be strings")
        if not isinstance(inputs, list) or not all(isinstance(t, str) for t in inputs):
            raise SchemaError(f"op {oid}: 'inputs' must be a list of tensor ids")
        for t in [*inputs, output]:
            if t not in tensors:
                raise SchemaError(f"op {oid}: unknown tensor {t!r}")
        bwd = spec.get("backward_of")
        if bwd is not None and not isinstance(bwd, str):
            raise SchemaError(f"op {oid}: backward_of must be an op id")
        ops[oid] = OpNode(oid, name, tuple(inputs), output, bwd,
                          _timestep(spec.get("timestep"), f"op {oid}"))

    producers: dict[str, str] = {}
    for op in ops.values():
        if op.backward_of is not None:
            fwd = ops.get(op.backward_of)
            if fwd is None:
                raise SchemaError(f"op {op.id}: backward_of refers to unknown op {op.backward_of!r}")
            if fwd.backward_of is not None:
                raise SchemaError(f"op {op.id}: backward_of must name a forward op")
        if op.output in producers:
            raise SchemaError(f"tensor {op.output} is produced by both {producers[op.output]} and {op.id}")
        producers[op.output] = op.id

    g = DataflowGraph(tensors, ops, program)
    for op in ops.values():
        _check_op(g, op)
    g.topo_order = _topological_order(g)
    return g


def _check_op(g: DataflowGraph, op: OpNode) -> None:
    if op.def_name not in g.program:
        raise UnknownOperator(f"op {op.id}: unknown operator {op.def_name!r}")
    d = g.program[op.def_name]
    if len(op.inputs) != len(d.params):
        raise ShapeMismatch(f"op {op.id}: {d.name} takes {len(d.params)} inputs, got {len(op.inputs)}")
    for (p, rank), t in zip(d.params, op.inputs):
        if len(g.tensors[t].shape) != rank:
            raise ShapeMismatch(
                f"op {op.id}: input {t} has rank {len(g.tensors[t].shape)}, {d.name}.{p} expects {rank}")
    out_shape = g.tensors[op.output].shape
    if len(out_shape) != len(d.output_vars):
        raise ShapeMismatch(
            f"op {op.id}: output {op.output} has rank {len(out_shape)}, "
            f"{d.name} produces rank {len(d.output_vars)}")
    shapes = {p: g.tensors[t].shape for p, t in zip(d.param_names, op.inputs)}
    try:
        ext = infer_extents(d, shapes, out_shape)
    except UnconcretizableShape as e:
        raise ShapeMismatch(f"op {op.id}: {e}") from None
    for acc in d.accesses():
        for axis, ix in enumerate(acc.indices):
            v = ix.single_var()
            n = shapes[acc.tensor][axis]
            if v is not None and ext[v] != n:
                raise ShapeMismatch(
                    f"op {op.id}: dimension {axis} of {acc.tensor} is {n} "
                    f"but index {v} ranges over {ext[v]}")
    for call in d.opaque_calls():
        for axis, s in enumerate(call.slots):
            v = s.single_var() if s is not None else None
            if v is not None and ext[v] != shapes[call.tensor][axis]:
                raise ShapeMismatch(f"op {op.id}: dimension {axis} of {call.tensor} disagrees with {v}")


def _topological_order(g: DataflowGraph) -> list[str]:
    producer = g.producer()
    indeg = {o: 0 for o in g.ops}
    succ: dict[str, list[str]] = defaultdict(list)
    for op in g.ops.values():
        for t in dict.fromkeys(op.inputs):
            p = producer.get(t)
            if p is not None:
                indeg[op.id] += 1
                succ[p].append(op.id)
    index = {o: i for i, o in enumerate(g.ops)}
    order = []
    heap = [(index[o], o) for o, n in indeg.items() if n == 0]
    heapq.heapify(heap)
    while heap:
        _, o = heapq.heappop(heap)
        order.append(o)
        for s in succ[o]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, (index[s], s))
    if len(order) != len(g.ops):
        stuck = sorted(o for o, n in indeg.items() if n > 0)
        raise CycleDetected(f"dataflow graph has a cycle through ops {stuck[:5]}")
    return order


def load_graph(source: Union[str, Mapping[str, Any]], program: Optional[TdlProgram] = None) -> DataflowGraph:
    """Load a graph from a JSON file path or an already-parsed mapping."""
    if isinstance(source, Mapping):
        return graph_from_dict(source, program)
    try:
        with open(source, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{source}: invalid JSON: {e}") from None
    return graph_from_dict(data, program)


def serialize(g: DataflowGraph) -> dict:
    tensors = {}
    for t in g.tensors.values():
        spec: dict[str, Any] = {"shape": list(t.shape), "role": t.role}
        if t.grad_of is not None:
            spec["grad_of"] = t.grad_of
        if t.timestep is not None:
            spec["timestep"] = list(t.timestep)
        tensors[t.id] = spec
    ops = {}
    for o in g.ops.values():
        spec = {"def": o.def_name, "inputs": list(o.inputs), "output": o.output}
        if o.backward_of is not None:
            spec["backward_of"] = o.backward_of
        if o.timestep is not None:
            spec["timestep"] = list(o.timestep)
        ops[o.id] = spec
    return {"tensors": tensors, "ops": ops}


def graph_to_dot(g: DataflowGraph) -> str:
    lines = ["digraph dataflow {", "  rankdir=LR;"]
    for t in g.tensors.values():
        lines.append(f'  "{t.id}" [shape=ellipse, label="{t.id}\\n{list(t.shape)}"];')
    for o in g.ops.values():
        lines.append(f'  "{o.id}" [shape=box, label="{o.id}\\n{o.def_name}"];')
        for t in o.inputs:
            lines.append(f'  "{t}" -> "{o.id}";')
        lines.append(f'  "{o.id}" -> "{o.output}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Coarsening

class _UnionFind:
    def __init__(self, items: Iterable[str] = ()):
        self.parent = {x: x for x in items}

    def add(self, x: str) -> None:
        self.parent.setdefault(x, x)

    def find(self, x: str) -> str:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra

    def classes(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for x in self.parent:
            out[self.find(x)].append(x)
        return out


@dataclass(frozen=True)
class Group:
    index: int
    kind: str  # "op" or "tensor"
    ops: tuple[str, ...]
    tensors: tuple[str, ...]

    @property
    def label(self) -> str:
        return f"G{self.index}"


@dataclass
class CoarsenedGraph:
    graph: DataflowGraph
    groups: list[Group]
    membership: dict[str, int]
    ties: dict[str, str]  # tensor id -> representative of its tie class

    def touch_positions(self, tensor: str) -> list[int]:
        """Chain positions of every group that holds, produces or consumes ``tensor``."""
        return self._touch[tensor]

    def __post_init__(self) -> None:
        producer = self.graph.producer()
        consumers = self.graph.consumers()
        self._touch: dict[str, list[int]] = {}
        for t in self.graph.tensors:
            pos = {self.membership[t]}
            if t in producer:
                pos.add(self.membership[producer[t]])
            pos.update(self.membership[o] for o in consumers.get(t, ()))
            self._touch[t] = sorted(pos)

    def tie_classes(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for t in self.graph.tensors:
            out[self.ties[t]].append(t)
        return dict(out)


def _forward_group_dag(g: DataflowGraph, group_of: Mapping[str, str]) -> dict[str, set[str]]:
    producer = g.producer()
    succ: dict[str, set[str]] = defaultdict(set)
    for op in g.ops.values():
        if op.backward_of is not None:
            continue
        for t in op.inputs:
            p = producer.get(t)
            if p is None or g.ops[p].backward_of is not None:
                continue
            a, b = group_of[p], group_of[op.id]
            if a != b:
                succ[a].add(b)
    return succ


def _reachable(succ: Mapping[str, set[str]], src: str, dst: str, skip_direct: bool) -> bool:
    stack = [n for n in succ.get(src, ()) if not (skip_direct and n == dst)]
    seen = set(stack)
    while stack:
        n = stack.pop()
        if n == dst:
            return True
        for m in succ.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def coarsen(g: DataflowGraph) -> CoarsenedGraph:
    """Group ops and tensors and order the groups along a chain."""
    producer = g.producer()
    consumers = g.consumers()
    ew = {o: is_elementwise(g.op_def(o)) for o in g.ops}

    # tensor groups: a tensor with its gradients and its timestep siblings
    tuf = _UnionFind(g.tensors)
    for t in g.tensors.values():
        if t.grad_of is not None:
            tuf.union(t.grad_of, t.id)
    by_gid: dict[str, list[str]] = defaultdict(list)
    for t in g.tensors.values():
        if t.timestep is not None:
            by_gid[t.timestep[0]].append(t.id)
    for members in by_gid.values():
        for t in members[1:]:
            tuf.union(members[0], t)

    # op groups: forward op with its backward ops, timestep siblings
    ouf = _UnionFind(g.ops)
    for op in g.ops.values():
        if op.backward_of is not None:
            ouf.union(op.backward_of, op.id)
    by_gid = defaultdict(list)
    for op in g.ops.values():
        if op.timestep is not None:
            by_gid[op.timestep[0]].append(op.id)
    for members in by_gid.values():
        for o in members[1:]:
            ouf.union(members[0], o)

    # Element-wise ops that only combine members of one tensor group (gradient
    # accumulation, weight updates) travel with that tensor group.
    attached: dict[str, str] = {}
    op_classes = ouf.classes()
    for o in g.topo_order:
        op = g.ops[o]
        if op.backward_of is not None or not ew[o] or len(op_classes[ouf.find(o)]) != 1:
            continue
        roots = {tuf.find(t) for t in op.inputs}
        if len(roots) != 1:
            continue
        (root,) = roots
        out = g.tensors[op.output]
        if out.role == "weight" or (out.grad_of is not None and tuf.find(out.grad_of) == root):
            tuf.union(root, out.id)
            attached[o] = out.id

    # coalesce adjacent all-element-wise op groups joined by a tensor
    def current() -> dict[str, str]:
        return {o: ouf.find(o) for o in g.ops if o not in attached}

    changed = True
    while changed:
        changed = False
        group_of = current()
        members: dict[str, list[str]] = defaultdict(list)
        for o, r in group_of.items():
            members[r].append(o)
        all_ew = {r: all(ew[o] for o in ms) for r, ms in members.items()}
        succ = _forward_group_dag(g, group_of)
        for o in g.topo_order:
            if o in attached or g.ops[o].backward_of is not None:
                continue
            a = group_of[o]
            if not all_ew[a]:
                continue
            for c in consumers.get(g.ops[o].output, ()):
                if c in attached or g.ops[c].backward_of is not None:
                    continue
                b = group_of[c]
                if a == b or not all_ew[b]:
                    continue
                if _reachable(succ, a, b, skip_direct=True):
                    continue
                ouf.union(a, b)
                changed = True
                break
            if changed:
                break

    # assemble groups
    group_of = current()
    op_members: dict[str, list[str]] = defaultdict(list)
    for o in g.ops:
        if o not in attached:
            op_members[group_of[o]].append(o)
    t_members = tuf.classes()
    t_ops: dict[str, list[str]] = defaultdict(list)
    for o, member in attached.items():
        t_ops[tuf.find(member)].append(o)

    topo_index = {o: i for i, o in enumerate(g.topo_order)}

    def op_key(ms: Sequence[str]) -> int:
        fwd = [topo_index[o] for o in ms if g.ops[o].backward_of is None]
        return min(fwd) if fwd else min(topo_index[o] for o in ms)

    op_keys = {r: op_key(ms) for r, ms in op_members.items()}
    keys: dict[tuple[str, str], tuple] = {}
    for r, ms in op_members.items():
        keys[("op", r)] = (op_keys[r], 0, 0)
    for r, ts in t_members.items():
        primary = [t for t in ts if g.tensors[t].grad_of is None] or ts
        prods = {group_of[producer[t]] for t in primary
                 if t in producer and producer[t] not in attached}
        if prods:
            keys[("tensor", r)] = (max(op_keys[p] for p in prods), 1, 0)
            continue
        cons = {group_of[c] for t in ts for c in consumers.get(t, ()) if c not in attached}
        if cons:
            keys[("tensor", r)] = (min(op_keys[c] for c in cons), -1, 0)
        else:
            keys[("tensor", r)] = (len(g.ops), 2, 0)

    ordered = sorted(keys, key=lambda k: (keys[k], k[1]))
    groups: list[Group] = []
    membership: dict[str, int] = {}
    order_t = {t: i for i, t in enumerate(g.tensors)}
    order_o = {o: i for i, o in enumerate(g.ops)}
    for idx, (kind, r) in enumerate(ordered):
        if kind == "op":
            ops = tuple(sorted(op_members[r], key=order_o.get))
            grp = Group(idx, "op", ops, ())
        else:
            ts = tuple(sorted(t_members[r], key=order_t.get))
            ops = tuple(sorted(t_ops.get(r, ()), key=order_o.get))
            grp = Group(idx, "tensor", ops, ts)
        groups.append(grp)
        for n in grp.ops + grp.tensors:
            membership[n] = idx

    # tie classes: tensors forced to share a split dimension
    tie = _UnionFind(g.tensors)
    for o in g.ops.values():
        if ew[o.id]:
            for t in o.inputs:
                tie.union(o.output, t)
    first_of_gid: dict[str, str] = {}
    for t in g.tensors.values():
        if t.timestep is not None:
            first = first_of_gid.setdefault(t.timestep[0], t.id)
            tie.union(first, t.id)
    tie_members = tie.classes()
    ties = {t: min(tie_members[tie.find(t)], key=order_t.get) for t in g.tensors}

    cg = CoarsenedGraph(g, groups, membership, ties)
    _check_connected(cg)
    return cg


def _check_connected(cg: CoarsenedGraph) -> None:
    n = len(cg.groups)
    if n <= 1:
        return
    uf = _UnionFind(str(i) for i in range(n))
    for t in cg.graph.tensors:
        pos = cg.touch_positions(t)
        for p in pos[1:]:
            uf.union(str(pos[0]), str(p))
    for g in cg.groups:
        for o in g.ops:
            op = cg.graph.ops[o]
            for t in (*op.inputs, op.output):
                uf.union(str(g.index), str(cg.membership[t]))
    if len(uf.classes()) > 1:
        for i in range(n - 1):
            if not cut_states(cg, i):
                raise NotLinear(
                    f"coarsened graph is disconnected: no tensor crosses the cut between "
                    f"{cg.groups[i].label} and {cg.groups[i + 1].label}")
        comps = sorted(sorted(int(x) for x in c) for c in uf.classes().values())
        raise NotLinear(f"coarsened graph has {len(comps)} disconnected components; "
                        f"first component holds groups {comps[0]}")


def cut_states(cg: CoarsenedGraph, cut: int, ways: Optional[int] = None,
               limit: int = DEFAULT_CUT_LIMIT) -> list[str]:
    """Tensors touched on both sides of the cut after chain position ``cut``.

    With ``ways`` given, raises :class:`CutTooWide` when the split choices of
    the crossing tensors exceed ``limit`` joint states.
    """
    if not 0 <= cut < len(cg.groups) - 1:
        raise IndexError(f"cut {cut} out of range for {len(cg.groups)} groups")
    crossing = [t for t in cg.graph.tensors
                if cg.touch_positions(t)[0] <= cut < cg.touch_positions(t)[-1]]
    if ways is not None:
        states = 1
        seen = set()
        for t in crossing:
            rep = cg.ties[t]
            if rep in seen:
                continue
            seen.add(rep)
            states *= len(cg.graph.tensors[t].shape)
            if states > limit:
                raise CutTooWide(
                    f"cut after {cg.groups[cut].label} has more than {limit} states "
                    f"({len(crossing)} crossing tensors)")
    return crossing


def coarsened_to_dot(cg: CoarsenedGraph) -> str:
    lines = ["digraph coarsened {", "  rankdir=LR;"]
    for grp in cg.groups:
        shape = "box" if grp.kind == "op" else "ellipse"
        label = "\\n".join(grp.ops + grp.tensors)
        lines.append(f'  "{grp.label}" [shape={shape}, label="{grp.label}\\n{label}"];')
    for a, b in zip(cg.groups, cg.groups[1:]):
        lines.append(f'  "{a.label}" -> "{b.label}" [style=dashed];')
    for t in cg.graph.tensors:
        pos = cg.touch_positions(t)
        home = cg.membership[t]
        for p in pos:
            if p != home:
                lines.append(f'  "G{home}" -> "G{p}" [label="{t}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
