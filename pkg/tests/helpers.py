"""Fixture generators shared by the test modules."""

from __future__ import annotations

import random

import numpy as np

from tdlpart.graph import DataflowGraph, load_graph
from tdlpart.models import GraphBuilder
from tdlpart.planner import BasicPlan, make_plan, strategies_for

SIZES = (2, 4, 8)


def random_graph_spec(rng: random.Random, max_ops: int = 6) -> dict:
    """A connected, halo-free graph of up to ``max_ops`` rank-2 operators."""
    b = GraphBuilder()
    cur = b.tensor("x", [rng.choice(SIZES), rng.choice(SIZES)], "input")
    made = [cur]
    n_ops = rng.randint(1, max_ops)
    for i in range(n_ops):
        rows, cols = b.tensors[cur]["shape"]
        kind = rng.choice(["matmul", "matmul", "transpose", "scale", "ew", "matmul_nt"])
        out = f"t{i}"
        if kind == "matmul":
            w = b.tensor(f"w{i}", [cols, rng.choice(SIZES)], "weight")
            b.op(f"op{i}", "matmul", [cur, w], b.tensor(out, [rows, b.tensors[w]["shape"][1]]))
        elif kind == "matmul_nt":
            w = b.tensor(f"w{i}", [rng.choice(SIZES), cols], "weight")
            b.op(f"op{i}", "matmul_nt", [cur, w], b.tensor(out, [rows, b.tensors[w]["shape"][0]]))
        elif kind == "transpose":
            b.op(f"op{i}", "transpose", [cur], b.tensor(out, [cols, rows]))
        elif kind == "scale":
            b.op(f"op{i}", "scale", [cur], b.tensor(out, [rows, cols]))
        else:
            same = [t for t in made if t != cur and b.tensors[t]["shape"] == [rows, cols]]
            other = rng.choice(same) if same and rng.random() < 0.7 else \
                b.tensor(f"y{i}", [rows, cols], "input")
            b.op(f"op{i}", rng.choice(["add", "mul", "sub"]), [cur, other], b.tensor(out, [rows, cols]))
        cur = out
        made.append(out)
    return b.build()


def random_basic_plan(g: DataflowGraph, rng: random.Random, ways: int = 2) -> BasicPlan:
    dims = {t: rng.randrange(len(n.shape)) for t, n in g.tensors.items()}
    split = {o: rng.choice(strategies_for(g.op_def(o), ways)).split_dim for o in g.ops}
    return make_plan(g, ways, dims, split)


def integer_inputs(g: DataflowGraph, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    produced = {o.output for o in g.ops.values()}
    return {t: rng.integers(-3, 4, size=n.shape).astype(np.float64)
            for t, n in g.tensors.items() if t not in produced}


def chain_graph(def_name: str, n: int, shape=(8,)) -> DataflowGraph:
    b = GraphBuilder()
    cur = b.tensor("t0", list(shape), "input")
    for i in range(n):
        nxt = b.tensor(f"t{i + 1}", list(shape))
        b.op(f"r{i}", def_name, [cur], nxt)
        cur = nxt
    return load_graph(b.build())
