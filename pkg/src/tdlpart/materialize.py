"""Expansion of a partition plan into an explicit per-worker dataflow graph.

Every worker gets a copy of every op.  A copy computes the part of the op's
iteration space selected by the plan's strategies, reads its inputs either
from locally stored tensor blocks or through one fused fetch node, and its
result is delivered to the owners of the output tensor's blocks.  When a
delivery combines several workers' contributions (or any remote one) it is a
reduce node owned by the receiving worker, which spreads the reduction work.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InconsistentPlan
from .graph import DataflowGraph
from .interp import _identity, evaluate, evaluate_box
from .planner import ELEMENT_BYTES, RecursivePlan
from .strategies import slice_bounds
from .tdl import OpaqueCall, OperatorDef, TensorAccess, walk

Box = tuple[tuple[int, int], ...]


def box_size(box: Box) -> int:
    return math.prod(max(0, hi - lo) for lo, hi in box)


def box_intersect(a: Box, b: Box) -> Box:
    return tuple((max(a0, b0), min(a1, b1)) for (a0, a1), (b0, b1) in zip(a, b))


def worker_digits(w: int, factors: Sequence[int]) -> list[int]:
    """Mixed-radix digits of worker ``w``; the first step is the most significant."""
    digits = []
    for k in reversed(factors):
        digits.append(w % k)
        w //= k
    return digits[::-1]


def _split_range(lo: int, hi: int, part: int, ways: int) -> tuple[int, int]:
    a, b = slice_bounds(part, ways, hi - lo)
    return lo + a, lo + b


@dataclass
class PNode:
    id: str
    kind: str  # "input", "op", "fetch" or "reduce"
    worker: int
    tensor: str
    op: Optional[str] = None
    param: Optional[str] = None
    region: Box = ()
    pieces: list[tuple[int, Box]] = field(default_factory=list)
    reducer: Optional[str] = None
    var_box: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def elements(self) -> int:
        return box_size(self.region)

    @property
    def remote_elements(self) -> int:
        return sum(box_size(b) for src, b in self.pieces if src != self.worker)

    def to_json(self) -> dict:
        out = {"id": self.id, "kind": self.kind, "worker": self.worker, "tensor": self.tensor,
               "region": [list(r) for r in self.region]}
        if self.op is not None:
            out["op"] = self.op
        if self.param is not None:
            out["param"] = self.param
        if self.pieces:
            out["pieces"] = [{"source": s, "region": [list(r) for r in b]} for s, b in self.pieces]
        if self.kind == "reduce":
            out["reducer"] = self.reducer
        if self.var_box:
            out["var_box"] = {v: list(r) for v, r in sorted(self.var_box.items())}
        return out


@dataclass
class PartitionedGraph:
    workers: int
    factors: list[int]
    nodes: dict[str, PNode]
    edges: set[tuple[str, str]]
    control_deps: list[tuple[str, str]]
    blocks: dict[str, list[Box]]  # tensor -> stored block per worker
    block_source: dict[tuple[str, int], str]  # (tensor, worker) -> node holding the block
    op_order: list[str]

    def worker_nodes(self, w: int) -> list[str]:
        return [n for n, node in self.nodes.items() if node.worker == w]

    def transfers(self) -> list[tuple[int, int, int]]:
        """``(source, destination, bytes)`` for every remote piece."""
        out = []
        for node in self.nodes.values():
            for src, b in node.pieces:
                if src != node.worker and box_size(b):
                    out.append((src, node.worker, box_size(b) * ELEMENT_BYTES))
        return out

    def total_bytes(self) -> int:
        return sum(b for _, _, b in self.transfers())

    def stored_bytes(self, w: int) -> int:
        return sum(box_size(blocks[w]) for blocks in self.blocks.values()) * ELEMENT_BYTES

    def fetch_nodes(self, op: Optional[str] = None, worker: Optional[int] = None) -> list[PNode]:
        return [n for n in self.nodes.values() if n.kind == "fetch"
                and (op is None or n.op == op) and (worker is None or n.worker == worker)]

    def reduce_nodes(self) -> list[PNode]:
        return [n for n in self.nodes.values() if n.kind == "reduce"]

    def all_edges(self) -> set[tuple[str, str]]:
        return self.edges | set(self.control_deps)

    def to_json(self) -> dict:
        return {
            "workers": self.workers,
            "factors": list(self.factors),
            "nodes": [self.nodes[n].to_json() for n in sorted(self.nodes)],
            "edges": sorted([list(e) for e in self.edges]),
            "control_deps": sorted([list(e) for e in self.control_deps]),
            "blocks": {t: [[list(r) for r in b] for b in bs] for t, bs in sorted(self.blocks.items())},
            "block_source": {t: [self.block_source[(t, w)] for w in range(self.workers)]
                             for t in sorted(self.blocks)},
            "op_order": list(self.op_order),
        }

    @staticmethod
    def from_json(data: Mapping) -> "PartitionedGraph":
        def box(raw) -> Box:
            return tuple((int(a), int(b)) for a, b in raw)

        try:
            nodes = {}
            for raw in data["nodes"]:
                pieces = [(int(p["source"]), box(p["region"])) for p in raw.get("pieces", [])]
                var_box = {v: (int(a), int(b)) for v, (a, b) in raw.get("var_box", {}).items()}
                node = PNode(raw["id"], raw["kind"], int(raw["worker"]), raw["tensor"],
                             raw.get("op"), raw.get("param"), box(raw["region"]), pieces,
                             raw.get("reducer"), var_box)
                nodes[node.id] = node
            blocks = {t: [box(b) for b in bs] for t, bs in data["blocks"].items()}
            source = {(t, w): n for t, ns in data["block_source"].items() for w, n in enumerate(ns)}
            return PartitionedGraph(
                int(data["workers"]), [int(f) for f in data["factors"]], nodes,
                {(a, b) for a, b in data["edges"]}, [(a, b) for a, b in data["control_deps"]],
                blocks, source, list(data.get("op_order", [])))
        except (KeyError, TypeError, ValueError) as e:
            raise InconsistentPlan(f"malformed partitioned graph: {e}") from None

    def to_dot(self) -> str:
        palette = ["lightblue", "lightpink", "palegreen", "khaki", "plum", "lightsalmon",
                   "lightcyan", "wheat"]
        shapes = {"input": "ellipse", "op": "box", "fetch": "diamond", "reduce": "hexagon"}
        lines = ["digraph partitioned {", "  rankdir=LR;"]
        for w in range(self.workers):
            lines.append(f"  subgraph cluster_w{w} {{")
            lines.append(f'    label="worker {w}";')
            for n in sorted(self.worker_nodes(w)):
                node = self.nodes[n]
                color = palette[w % len(palette)]
                lines.append(f'    "{n}" [shape={shapes[node.kind]}, style=filled, fillcolor={color}];')
            lines.append("  }")
        for a, b in sorted(self.edges):
            lines.append(f'  "{a}" -> "{b}";')
        for a, b in sorted(self.control_deps):
            lines.append(f'  "{a}" -> "{b}" [style=dashed];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def trivial_plan(g: DataflowGraph) -> RecursivePlan:
    """The single-worker plan."""
    return RecursivePlan(1, [], [], [], 0)


def _validate(g: DataflowGraph, plan: RecursivePlan) -> None:
    if math.prod(plan.factors) != plan.workers or [s.ways for s in plan.steps] != list(plan.factors):
        raise InconsistentPlan("plan factors do not match its steps and worker count")
    for i, step in enumerate(plan.steps):
        missing = [t for t in g.tensors if t not in step.tensor_dims]
        missing += [o for o in g.ops if o not in step.op_strategies]
        if missing:
            raise InconsistentPlan(f"step {i + 1} does not cover {sorted(missing)[:5]}")
        extra = [n for n in (*step.tensor_dims, *step.op_strategies)
                 if n not in g.tensors and n not in g.ops]
        if extra:
            raise InconsistentPlan(f"step {i + 1} mentions unknown nodes {sorted(extra)[:5]}")
        for o, s in step.op_strategies.items():
            d = g.op_def(o)
            if s.split_dim not in d.output_vars + d.reduce_vars:
                raise InconsistentPlan(f"op {o}: {s.split_dim} is not an index variable of {d.name}")
        for t, dim in step.tensor_dims.items():
            if not 0 <= dim < len(g.tensors[t].shape):
                raise InconsistentPlan(f"tensor {t}: split dimension {dim} out of range")


def _access_region(d: OperatorDef, param: str, var_box: Mapping[str, tuple[int, int]],
                   shape: Sequence[int]) -> Box:
    """Coordinates of ``param`` read when index variables range over ``var_box``."""
    lo = [None] * len(shape)
    hi = [None] * len(shape)
    if any(b <= a for a, b in var_box.values()):
        return tuple((0, 0) for _ in shape)
    for node in walk(d.body):
        if isinstance(node, TensorAccess) and node.tensor == param:
            idx = node.indices
        elif isinstance(node, OpaqueCall) and node.tensor == param:
            idx = node.slots
        else:
            continue
        for axis, ix in enumerate(idx):
            if ix is None:
                a, b = 0, shape[axis] - 1
            else:
                a = b = ix.const
                for v, c in ix.terms:
                    vlo, vhi = var_box[v]
                    a += c * (vlo if c > 0 else vhi - 1)
                    b += c * (vhi - 1 if c > 0 else vlo)
            lo[axis] = a if lo[axis] is None else min(lo[axis], a)
            hi[axis] = b if hi[axis] is None else max(hi[axis], b)
    region = []
    for axis, n in enumerate(shape):
        if lo[axis] is None:
            region.append((0, 0))
            continue
        a, b = max(lo[axis], 0), min(hi[axis] + 1, n)
        region.append((a, max(a, b)))
    return tuple(region)


def materialize(g: DataflowGraph, plan: RecursivePlan) -> PartitionedGraph:
    _validate(g, plan)
    k = plan.workers
    factors = list(plan.factors)
    digits = [worker_digits(w, factors) for w in range(k)]

    blocks: dict[str, list[Box]] = {}
    for t, node in g.tensors.items():
        per = []
        for w in range(k):
            box = [(0, n) for n in node.shape]
            for step, dig in zip(plan.steps, digits[w]):
                d = step.tensor_dims[t]
                box[d] = _split_range(*box[d], dig, step.ways)
            per.append(tuple(box))
        blocks[t] = per

    nodes: dict[str, PNode] = {}
    edges: set[tuple[str, str]] = set()
    block_source: dict[tuple[str, int], str] = {}
    producer = g.producer()

    for t, node in g.tensors.items():
        if t not in producer:
            for w in range(k):
                nid = f"input:{t}@{w}"
                nodes[nid] = PNode(nid, "input", w, t, region=blocks[t][w])
                block_source[(t, w)] = nid

    for o in g.topo_order:
        op = g.ops[o]
        d = g.op_def(o)
        ext = g.extents(o)
        reduce_split = any(step.op_strategies[o].kind == "reduce" for step in plan.steps)
        op_ids = []
        out_boxes = []
        for w in range(k):
            var_box = {v: (0, n) for v, n in ext.items()}
            for step, dig in zip(plan.steps, digits[w]):
                v = step.op_strategies[o].split_dim
                var_box[v] = _split_range(*var_box[v], dig, step.ways)
            out_box = tuple(var_box[v] for v in d.output_vars)
            nid = f"op:{o}@{w}"
            nodes[nid] = PNode(nid, "op", w, op.output, op=o, region=out_box, var_box=var_box)
            op_ids.append(nid)
            out_boxes.append(out_box)
            for p, t in zip(d.param_names, op.inputs):
                region = _access_region(d, p, var_box, g.tensors[t].shape)
                pieces = []
                for u in range(k):
                    b = box_intersect(region, blocks[t][u])
                    if box_size(b):
                        pieces.append((u, b))
                if any(u != w for u, _ in pieces):
                    fid = f"fetch:{o}:{p}@{w}"
                    nodes[fid] = PNode(fid, "fetch", w, t, op=o, param=p, region=region, pieces=pieces)
                    for u, _ in pieces:
                        edges.add((block_source[(t, u)], fid))
                    edges.add((fid, nid))
                elif pieces:
                    edges.add((block_source[(t, w)], nid))
        reducer = d.reducer if reduce_split else None
        for w in range(k):
            block = blocks[op.output][w]
            pieces = []
            for u in range(k):
                b = box_intersect(out_boxes[u], block)
                if box_size(b):
                    pieces.append((u, b))
            if any(u != w for u, _ in pieces):
                rid = f"reduce:{o}@{w}"
                nodes[rid] = PNode(rid, "reduce", w, op.output, op=o, region=block,
                                   pieces=pieces, reducer=reducer)
                for u, _ in pieces:
                    edges.add((op_ids[u], rid))
                block_source[(op.output, w)] = rid
            else:
                block_source[(op.output, w)] = op_ids[w]
    return PartitionedGraph(k, factors, nodes, edges, [], blocks, block_source, list(g.topo_order))


# ---------------------------------------------------------------------------
# Control dependencies

def _local_succ(pg: PartitionedGraph, w: int) -> dict[str, set[str]]:
    succ: dict[str, set[str]] = defaultdict(set)
    for a, b in pg.all_edges():
        if pg.nodes[a].worker == w and pg.nodes[b].worker == w:
            succ[a].add(b)
    return succ


def _reaches(succ: Mapping[str, set[str]], src: str, dst: str) -> bool:
    stack, seen = [src], {src}
    while stack:
        n = stack.pop()
        if n == dst:
            return True
        for m in succ.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def insert_control_deps(pg: PartitionedGraph, g: DataflowGraph) -> PartitionedGraph:
    """Order each worker's op copies like the original graph.

    For every original edge ``a -> b`` and worker ``w`` where ``a@w`` does not
    already precede ``b@w`` locally, add ``a@w -> b@w`` and ``a@w -> fetch`` for
    each fetch node of ``b`` on ``w`` (which also delays those fetches).
    """
    producer = g.producer()
    added: list[tuple[str, str]] = list(pg.control_deps)
    for w in range(pg.workers):
        succ = _local_succ(pg, w)
        for b in g.topo_order:
            for t in dict.fromkeys(g.ops[b].inputs):
                a = producer.get(t)
                if a is None:
                    continue
                src, dst = f"op:{a}@{w}", f"op:{b}@{w}"
                if _reaches(succ, src, dst):
                    continue
                targets = [dst] + [f.id for f in pg.fetch_nodes(b, w)]
                for tgt in targets:
                    if (src, tgt) not in pg.edges:
                        added.append((src, tgt))
                        succ[src].add(tgt)
    return PartitionedGraph(pg.workers, pg.factors, pg.nodes, pg.edges, added,
                            pg.blocks, pg.block_source, pg.op_order)


def topological_nodes(pg: PartitionedGraph) -> list[str]:
    indeg = {n: 0 for n in pg.nodes}
    succ: dict[str, list[str]] = defaultdict(list)
    for a, b in pg.all_edges():
        succ[a].append(b)
        indeg[b] += 1
    ready = sorted(n for n, c in indeg.items() if c == 0)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in sorted(succ[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    if len(order) != len(pg.nodes):
        raise InconsistentPlan("partitioned graph has a cycle")
    return order


# ---------------------------------------------------------------------------
# Memory planning

@dataclass
class WorkerMemory:
    worker: int
    schedule: list[str]
    assignment: dict[str, int]  # node -> pool buffer id
    buffer_sizes: list[int]  # bytes per pool buffer
    persistent_bytes: int

    @property
    def peak_bytes(self) -> int:
        return self.persistent_bytes + sum(self.buffer_sizes)

    @property
    def buffers(self) -> int:
        return len(self.buffer_sizes)

    def to_json(self) -> dict:
        return {"worker": self.worker, "peak_bytes": self.peak_bytes, "buffers": self.buffers,
                "buffer_bytes": list(self.buffer_sizes), "persistent_bytes": self.persistent_bytes}


@dataclass
class MemoryPlan:
    workers: list[WorkerMemory]

    def peak(self) -> int:
        return max((w.peak_bytes for w in self.workers), default=0)

    def to_json(self) -> list[dict]:
        return [w.to_json() for w in self.workers]


def _schedule(pg: PartitionedGraph, w: int, delayed_fetch: bool) -> list[str]:
    local = [n for n in pg.nodes if pg.nodes[n].worker == w]
    local_set = set(local)
    preds: dict[str, set[str]] = defaultdict(set)
    for a, b in pg.all_edges():
        if a in local_set and b in local_set:
            preds[b].add(a)
    rank = {o: i for i, o in enumerate(pg.op_order)}

    def key(n: str) -> tuple:
        node = pg.nodes[n]
        kinds = {"input": 0, "fetch": 1, "op": 2, "reduce": 3}
        return (rank.get(node.op, -1), kinds[node.kind], n)

    fetch_of: dict[str, list[str]] = defaultdict(list)
    if delayed_fetch:
        for n in local:
            node = pg.nodes[n]
            if node.kind == "fetch":
                fetch_of[f"op:{node.op}@{w}"].append(n)
    deferred = {f for fs in fetch_of.values() for f in fs}
    done: set[str] = set()
    order: list[str] = []
    pending = sorted((n for n in local if n not in deferred), key=key)
    while pending:
        for i, n in enumerate(pending):
            needs = set(preds[n])
            for f in fetch_of.get(n, ()):
                needs |= preds[f]
            needs -= set(fetch_of.get(n, ()))
            if needs <= done:
                break
        else:
            raise InconsistentPlan(f"worker {w} has a dependency cycle")
        pending.pop(i)
        for f in sorted(fetch_of.get(n, ()), key=key):
            order.append(f)
            done.add(f)
        order.append(n)
        done.add(n)
    return order


def _ancestors(preds: Mapping[str, set[str]], n: str) -> set[str]:
    out: set[str] = set()
    stack = list(preds.get(n, ()))
    while stack:
        m = stack.pop()
        if m not in out:
            out.add(m)
            stack.extend(preds.get(m, ()))
    return out


def plan_memory(pg: PartitionedGraph, delayed_fetch: bool = True) -> MemoryPlan:
    """Static buffer assignment per worker.

    A pool buffer is reused by a new producer only when every consumer of its
    current contents is a strict local ancestor of that producer.  A consumer on
    another worker is represented on the owning worker by the matching fetch or
    reduce node for the same op, or by the op copy itself.
    """
    consumers: dict[str, set[str]] = defaultdict(set)
    for a, b in pg.edges:
        if pg.nodes[a].worker == pg.nodes[b].worker:
            consumers[a].add(b)
            continue
        na, nb = pg.nodes[a], pg.nodes[b]
        proxy = f"{nb.kind}:{nb.op}:{nb.param}@{na.worker}" if nb.kind == "fetch" else f"reduce:{nb.op}@{na.worker}"
        if proxy not in pg.nodes:
            proxy = f"op:{nb.op}@{na.worker}"
        consumers[a].add(proxy)
    result = []
    for w in range(pg.workers):
        sched = _schedule(pg, w, delayed_fetch)
        local = set(sched)
        preds: dict[str, set[str]] = defaultdict(set)
        for a, b in pg.all_edges():
            if a in local and b in local:
                preds[b].add(a)
        sizes: list[int] = []
        holder: dict[int, str] = {}
        assignment: dict[str, int] = {}
        persistent = 0
        for n in sched:
            node = pg.nodes[n]
            nbytes = node.elements * ELEMENT_BYTES
            if node.kind == "input":
                persistent += nbytes
                continue
            anc = _ancestors(preds, n)
            free = [b for b, h in holder.items()
                    if h != n and consumers[h] and all(c in anc for c in consumers[h])
                    and h in anc]
            exact = [b for b in free if sizes[b] == nbytes]
            bigger = sorted((sizes[b], b) for b in free if sizes[b] >= nbytes)
            if exact:
                buf = min(exact)
            elif bigger:
                buf = bigger[0][1]
            elif free:
                buf = max(free, key=lambda b: (sizes[b], -b))
                sizes[buf] = nbytes
            else:
                buf = len(sizes)
                sizes.append(nbytes)
            holder[buf] = n
            assignment[n] = buf
        result.append(WorkerMemory(w, sched, assignment, sizes, persistent))
    return MemoryPlan(result)


# ---------------------------------------------------------------------------
# Reference execution

def _region_slices(box: Box) -> tuple[slice, ...]:
    return tuple(slice(lo, hi) for lo, hi in box)


def run_partitioned(pg: PartitionedGraph, g: DataflowGraph,
                    inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Execute ``pg`` with the reference interpreter; returns every tensor, assembled.

    Each node's value is a global-coordinate array that is NaN outside the
    region the node holds, so any read of data that was not delivered shows up
    as NaN in the result.
    """
    values: dict[str, np.ndarray] = {}
    shape_of = {t: n.shape for t, n in g.tensors.items()}

    def empty(t: str) -> np.ndarray:
        return np.full(shape_of[t], np.nan)

    for n in topological_nodes(pg):
        node = pg.nodes[n]
        arr = empty(node.tensor)
        if node.kind == "input":
            sl = _region_slices(node.region)
            arr[sl] = np.asarray(inputs[node.tensor], dtype=float)[sl]
        elif node.kind == "fetch":
            for u, b in node.pieces:
                sl = _region_slices(b)
                arr[sl] = values[pg.block_source[(node.tensor, u)]][sl]
        elif node.kind == "op":
            op = g.ops[node.op]
            d = g.op_def(node.op)
            args = {}
            for p, t in zip(d.param_names, op.inputs):
                fid = f"fetch:{node.op}:{p}@{node.worker}"
                args[p] = values[fid] if fid in pg.nodes else values[pg.block_source[(t, node.worker)]]
            if box_size(node.region):
                arr[_region_slices(node.region)] = evaluate_box(d, args, node.var_box)
        else:
            sl = _region_slices(node.region)
            if node.reducer is not None:
                arr[sl] = _identity(node.reducer)
            for u, b in node.pieces:
                bs = _region_slices(b)
                src = values[f"op:{node.op}@{u}"][bs]
                if node.reducer is None:
                    arr[bs] = src
                elif node.reducer == "Sum":
                    arr[bs] = arr[bs] + src
                elif node.reducer == "Prod":
                    arr[bs] = arr[bs] * src
                elif node.reducer == "Max":
                    arr[bs] = np.maximum(arr[bs], src)
                else:
                    arr[bs] = np.minimum(arr[bs], src)
        values[n] = arr
    out = {}
    for t in g.tensors:
        arr = empty(t)
        for w in range(pg.workers):
            sl = _region_slices(pg.blocks[t][w])
            arr[sl] = values[pg.block_source[(t, w)]][sl]
        out[t] = arr
    return out


def run_reference(g: DataflowGraph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Execute the unpartitioned graph."""
    values = {t: np.asarray(v, dtype=float) for t, v in inputs.items()}
    for o in g.topo_order:
        op = g.ops[o]
        d = g.op_def(o)
        args = {p: values[t] for p, t in zip(d.param_names, op.inputs)}
        values[op.output] = evaluate(d, args, g.tensors[op.output].shape, g.extents(o))
    return values
