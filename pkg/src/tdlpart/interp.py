"""Vectorised reference interpreter for TDL operators.

Reads outside a tensor's bounds evaluate to zero, which gives the usual
zero-padding semantics for shifted accesses such as ``data[b, ci, x + dx]``.
"""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import UnconcretizableShape, UnknownOperator
from .tdl import (
    Affine,
    Arith,
    Const,
    Expr,
    IndexVar,
    OpaqueCall,
    OperatorDef,
    Reduce,
    TensorAccess,
)

OPAQUE_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "Cholesky": np.linalg.cholesky,
    "Inverse": np.linalg.inv,
    "Identity": lambda a: a,
    "Transpose": lambda a: np.swapaxes(a, -1, -2),
    "Sort": lambda a: np.sort(a, axis=-1),
}


def register_opaque(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    """Register a batched function usable as ``opaque(name; ...)``.

    ``fn`` receives an array whose trailing axes are the sliced dimensions and
    must return an array with the same leading (batch) axes.
    """
    OPAQUE_FUNCTIONS[name] = fn


def _identity(reducer: str) -> float:
    return {"Sum": 0.0, "Prod": 1.0, "Max": -np.inf, "Min": np.inf}[reducer]


def _reduce(reducer: str, x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    fn = {"Sum": np.sum, "Prod": np.prod, "Max": np.max, "Min": np.min}[reducer]
    return fn(x, axis=axes)


def infer_extents(
    d: OperatorDef,
    input_shapes: Mapping[str, Sequence[int]],
    output_shape: Optional[Sequence[int]] = None,
) -> dict[str, int]:
    """Extent of every index variable.

    Output variables take the output shape when given.  Any variable that
    appears alone in some input dimension takes that dimension's size.
    """
    ext: dict[str, int] = {}
    if output_shape is not None:
        ext.update(zip(d.output_vars, (int(s) for s in output_shape)))
    for acc in d.accesses():
        shape = input_shapes.get(acc.tensor)
        if shape is None:
            continue
        for ix, n in zip(acc.indices, shape):
            v = ix.single_var()
            if v is not None:
                ext.setdefault(v, int(n))
    for call in d.opaque_calls():
        shape = input_shapes.get(call.tensor)
        if shape is None:
            continue
        for ix, n in zip(call.slots, shape):
            if ix is not None and ix.single_var():
                ext.setdefault(ix.single_var(), int(n))
        sliced = [n for ix, n in zip(call.slots, shape) if ix is None]
        for r, n in zip(call.result, sliced):
            if r.single_var():
                ext.setdefault(r.single_var(), int(n))
    missing = [v for v in d.output_vars + d.reduce_vars if v not in ext]
    if missing:
        raise UnconcretizableShape(
            f"{d.name}: cannot determine the extent of index variable(s) {missing}")
    return ext


class _Grid:
    """Broadcastable coordinate arrays, one axis per index variable."""

    def __init__(self, order: Sequence[str], ranges: Mapping[str, tuple[int, int]]):
        self.order = tuple(order)
        self.shape = tuple(max(0, ranges[v][1] - ranges[v][0]) for v in order)
        n = len(order)
        self.coord: dict[str, np.ndarray] = {}
        for axis, v in enumerate(order):
            lo, hi = ranges[v]
            shape = [1] * n
            shape[axis] = max(0, hi - lo)
            self.coord[v] = np.arange(lo, hi, dtype=np.int64).reshape(shape)
        self.n = n

    def affine(self, a: Affine) -> np.ndarray:
        out = np.full([1] * self.n, a.const, dtype=np.int64)
        for v, c in a.terms:
            out = out + c * self.coord[v]
        return out


def _gather(arr: np.ndarray, idx: Sequence[np.ndarray]) -> np.ndarray:
    idx = np.broadcast_arrays(*idx)
    ok = np.ones(idx[0].shape, dtype=bool)
    clipped = []
    for i, n in zip(idx, arr.shape):
        ok &= (i >= 0) & (i < n)
        clipped.append(np.clip(i, 0, max(n - 1, 0)))
    if arr.size == 0:
        return np.zeros(ok.shape)
    vals = arr[tuple(clipped)]
    return np.where(ok, vals, 0.0)


def _eval(e: Expr, g: _Grid, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    if isinstance(e, Const):
        return np.asarray(float(e.value))
    if isinstance(e, IndexVar):
        return g.coord[e.name].astype(float)
    if isinstance(e, TensorAccess):
        return _gather(np.asarray(inputs[e.tensor], dtype=float), [g.affine(i) for i in e.indices])
    if isinstance(e, Arith):
        a = _eval(e.lhs, g, inputs)
        b = _eval(e.rhs, g, inputs)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b
    if isinstance(e, OpaqueCall):
        return _eval_opaque(e, g, inputs)
    raise TypeError(f"cannot evaluate {e!r}")


def _eval_opaque(call: OpaqueCall, g: _Grid, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    fn = OPAQUE_FUNCTIONS.get(call.fn)
    if fn is None:
        raise UnknownOperator(f"no implementation registered for opaque function {call.fn!r}")
    arr = np.asarray(inputs[call.tensor], dtype=float)
    # batch grid over the variables used in non-slice slots
    batch_vars = [v for v in g.order if any(s is not None and v in s.vars for s in call.slots)]
    bshape = tuple(g.shape[g.order.index(v)] for v in batch_vars)
    nb = len(bshape)
    sliced_sizes = [n for s, n in zip(call.slots, arr.shape) if s is None]
    ns = len(sliced_sizes)
    idx = []
    si = 0
    for s, n in zip(call.slots, arr.shape):
        if s is None:
            shape = [1] * (nb + ns)
            shape[nb + si] = n
            idx.append(np.arange(n).reshape(shape))
            si += 1
        else:
            a = np.full([1] * nb, s.const, dtype=np.int64)
            for v, c in s.terms:
                shape = [1] * nb
                k = batch_vars.index(v)
                shape[k] = bshape[k]
                lo = int(g.coord[v].reshape(-1)[0]) if bshape[k] else 0
                a = a + c * (np.arange(bshape[k]) + lo).reshape(shape)
            idx.append(a.reshape(a.shape + (1,) * ns))
    block = _gather(arr, idx)
    block = np.broadcast_to(block, bshape + tuple(sliced_sizes))
    res = np.asarray(fn(np.array(block)), dtype=float)
    # index the result: batch axes follow grid coordinates, then result indices
    full = []
    for k, v in enumerate(batch_vars):
        axis = g.order.index(v)
        shape = [1] * g.n
        shape[axis] = bshape[k]
        full.append(np.arange(bshape[k]).reshape(shape))
    full.extend(g.affine(r) for r in call.result)
    return _gather(res, full)


def evaluate_box(
    d: OperatorDef,
    inputs: Mapping[str, np.ndarray],
    ranges: Mapping[str, tuple[int, int]],
) -> np.ndarray:
    """Evaluate ``d`` for index variables restricted to half-open ``ranges``.

    Inputs are global-coordinate arrays.  The result covers the output-variable
    box and, if ``d`` reduces, only the given slice of the reduction domain.
    """
    order = d.output_vars + d.reduce_vars
    g = _Grid(order, ranges)
    out_shape = g.shape[: len(d.output_vars)]
    if isinstance(d.body, Reduce):
        axes = tuple(range(len(d.output_vars), len(order)))
        if any(g.shape[a] == 0 for a in axes):
            return np.full(out_shape, _identity(d.body.reducer))
        vals = np.broadcast_to(_eval(d.body.body, g, inputs), g.shape)
        return _reduce(d.body.reducer, vals, axes)
    vals = _eval(d.body, g, inputs)
    return np.broadcast_to(vals, out_shape).copy()


def evaluate(
    d: OperatorDef,
    inputs: Mapping[str, np.ndarray],
    output_shape: Optional[Sequence[int]] = None,
    extents: Optional[Mapping[str, int]] = None,
) -> np.ndarray:
    """Evaluate ``d`` on concrete input arrays."""
    shapes = {k: np.shape(v) for k, v in inputs.items()}
    ext = dict(extents or {})
    if d.output_vars[0] not in ext or any(v not in ext for v in d.output_vars + d.reduce_vars):
        inferred = infer_extents(d, shapes, output_shape)
        inferred.update(ext)
        ext = inferred
    return evaluate_box(d, inputs, {v: (0, ext[v]) for v in d.output_vars + d.reduce_vars})


def combine(reducer: Optional[str], parts: Sequence[np.ndarray]) -> np.ndarray:
    """Merge per-worker partial results of a reduction."""
    if reducer is None or reducer == "Sum":
        return np.sum(parts, axis=0)
    return _reduce(reducer, np.stack(parts), (0,))
