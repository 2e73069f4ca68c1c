"""Builders for example dataflow graphs (as graph-JSON mappings).

All builders use operators from the bundled corpus and annotate backward ops
and gradient tensors so that coarsening can pair them with the forward pass.
"""

from __future__ import annotations

from typing import Any, Optional, Sequence


class GraphBuilder:
    def __init__(self) -> None:
        self.tensors: dict[str, dict[str, Any]] = {}
        self.ops: dict[str, dict[str, Any]] = {}

    def tensor(self, tid: str, shape: Sequence[int], role: str = "activation",
               grad_of: Optional[str] = None, timestep: Optional[tuple[str, int]] = None) -> str:
        spec: dict[str, Any] = {"shape": list(shape), "role": role}
        if grad_of is not None:
            spec["grad_of"] = grad_of
        if timestep is not None:
            spec["timestep"] = list(timestep)
        self.tensors[tid] = spec
        return tid

    def grad(self, of: str, name: Optional[str] = None) -> str:
        return self.tensor(name or f"d{of}", self.tensors[of]["shape"], "gradient", grad_of=of)

    def op(self, oid: str, def_name: str, inputs: Sequence[str], output: str,
           backward_of: Optional[str] = None, timestep: Optional[tuple[str, int]] = None) -> str:
        spec: dict[str, Any] = {"def": def_name, "inputs": list(inputs), "output": output}
        if backward_of is not None:
            spec["backward_of"] = backward_of
        if timestep is not None:
            spec["timestep"] = list(timestep)
        self.ops[oid] = spec
        return oid

    def build(self) -> dict[str, Any]:
        return {"tensors": dict(self.tensors), "ops": dict(self.ops)}


def single_op(def_name: str, input_shapes: Sequence[Sequence[int]],
              output_shape: Sequence[int]) -> dict[str, Any]:
    b = GraphBuilder()
    ins = [b.tensor(f"in{i}", s, "input") for i, s in enumerate(input_shapes)]
    b.op("op", def_name, ins, b.tensor("out", output_shape))
    return b.build()


def matmul_graph(n: int = 8, m: Optional[int] = None, k: Optional[int] = None) -> dict[str, Any]:
    """``C = A @ B`` with A of shape (n, k) and B of shape (k, m)."""
    m = n if m is None else m
    k = n if k is None else k
    b = GraphBuilder()
    b.tensor("A", [n, k], "input")
    b.tensor("B", [k, m], "weight")
    b.tensor("C", [n, m])
    b.op("mm", "matmul", ["A", "B"], "C")
    return b.build()


def mlp(layers: int = 2, batch: int = 8, widths: Optional[Sequence[int]] = None,
        with_input_grad: bool = True, with_update: bool = False) -> dict[str, Any]:
    """Fully connected network with an element-wise activation after each layer.

    Forward per layer: ``h = x @ W``, ``a = scale(h)``.  Backward:
    ``dh = mul(da, h)``, ``dW = x^T @ dh``, ``dx = dh @ W^T``.
    """
    widths = list(widths or [8] * (layers + 1))
    b = GraphBuilder()
    x = b.tensor("x", [batch, widths[0]], "input")
    acts = [x]
    for i in range(layers):
        w = b.tensor(f"W{i + 1}", [widths[i], widths[i + 1]], "weight")
        h = b.tensor(f"h{i + 1}", [batch, widths[i + 1]])
        a = b.tensor(f"a{i + 1}", [batch, widths[i + 1]])
        b.op(f"fc{i + 1}", "matmul", [acts[-1], w], h)
        b.op(f"act{i + 1}", "scale", [h], a)
        acts.append(a)
    da = b.grad(acts[-1])
    for i in reversed(range(layers)):
        n = i + 1
        dh = b.grad(f"h{n}")
        b.op(f"act{n}_bwd", "mul", [da, f"h{n}"], dh, backward_of=f"act{n}")
        dw = b.grad(f"W{n}")
        b.op(f"fc{n}_bwd_w", "matmul_tn", [acts[i], dh], dw, backward_of=f"fc{n}")
        if i > 0 or with_input_grad:
            da = b.grad(acts[i])
            b.op(f"fc{n}_bwd_x", "matmul_nt", [dh, f"W{n}"], da, backward_of=f"fc{n}")
        if with_update:
            b.op(f"sgd{n}", "sgd_update", [f"W{n}", dw],
                 b.tensor(f"W{n}_new", b.tensors[f"W{n}"]["shape"], "weight"))
    return b.build()


def sgd_chain(n: int = 8, length: int = 5) -> dict[str, Any]:
    """A weight update composed of ``length`` element-wise ops."""
    b = GraphBuilder()
    w = b.tensor("W", [n, n], "weight")
    g = b.tensor("G", [n, n], "gradient", grad_of="W")
    cur = g
    defs = ["scale", "add", "scale", "mul", "sub"]
    for i in range(length):
        name = defs[i % len(defs)]
        out = b.tensor(f"t{i}", [n, n])
        args = [cur] if name == "scale" else [cur, w] if name != "sub" else [w, cur]
        b.op(f"opt{i}", name, args, out)
        cur = out
    return b.build()


def residual_block(batch: int = 8, width: int = 8) -> dict[str, Any]:
    """``y = (x @ W1) @ W2 + x`` with its backward pass (fork-join)."""
    b = GraphBuilder()
    b.tensor("x", [batch, width], "input")
    b.tensor("W1", [width, width], "weight")
    b.tensor("W2", [width, width], "weight")
    b.tensor("h", [batch, width])
    b.tensor("m", [batch, width])
    b.tensor("y", [batch, width])
    b.op("fc1", "matmul", ["x", "W1"], "h")
    b.op("fc2", "matmul", ["h", "W2"], "m")
    b.op("skip", "add", ["m", "x"], "y")
    b.grad("y")
    b.grad("m")
    b.op("skip_bwd", "scale", ["dy"], "dm", backward_of="skip")
    b.grad("W2")
    b.op("fc2_bwd_w", "matmul_tn", ["h", "dm"], "dW2", backward_of="fc2")
    b.grad("h")
    b.op("fc2_bwd_x", "matmul_nt", ["dm", "W2"], "dh", backward_of="fc2")
    b.grad("W1")
    b.op("fc1_bwd_w", "matmul_tn", ["x", "dh"], "dW1", backward_of="fc1")
    b.tensor("dx_main", [batch, width], "gradient", grad_of="x")
    b.op("fc1_bwd_x", "matmul_nt", ["dh", "W1"], "dx_main", backward_of="fc1")
    b.tensor("dx_skip", [batch, width], "gradient", grad_of="x")
    b.op("skip_bwd_x", "scale", ["dy"], "dx_skip", backward_of="skip")
    b.grad("x")
    b.op("dx_sum", "add", ["dx_main", "dx_skip"], "dx")
    return b.build()


def rnn(steps: int = 3, batch: int = 8, width: int = 8) -> dict[str, Any]:
    """Unrolled recurrent cell ``h[t] = scale(h[t-1] @ W + x[t] @ U)`` with tags."""
    b = GraphBuilder()
    b.tensor("W", [width, width], "weight")
    b.tensor("U", [width, width], "weight")
    h = b.tensor("h0", [batch, width], "input", timestep=("h", 0))
    for t in range(1, steps + 1):
        x = b.tensor(f"x{t}", [batch, width], "input", timestep=("x", t))
        p = b.tensor(f"p{t}", [batch, width], timestep=("p", t))
        q = b.tensor(f"q{t}", [batch, width], timestep=("q", t))
        s = b.tensor(f"s{t}", [batch, width], timestep=("s", t))
        b.op(f"rec{t}", "matmul", [h, "W"], p, timestep=("rec", t))
        b.op(f"inp{t}", "matmul", [x, "U"], q, timestep=("inp", t))
        b.op(f"sum{t}", "add", [p, q], s, timestep=("sum", t))
        h = b.tensor(f"h{t}", [batch, width], timestep=("h", t))
        b.op(f"act{t}", "scale", [s], h, timestep=("act", t))
    return b.build()


def conv_group(batch: int = 8, channels: int = 8, size: int = 8, kernel: int = 4) -> dict[str, Any]:
    """One convolution with both backward ops: six rank-4 tensors in one op group."""
    b = GraphBuilder()
    b.tensor("data", [batch, channels, size, size], "input")
    b.tensor("filters", [channels, channels, kernel, kernel], "weight")
    b.tensor("out", [batch, channels, size, size])
    b.op("conv", "conv2d", ["data", "filters"], "out")
    b.grad("out")
    b.grad("data")
    b.grad("filters")
    b.op("conv_bwd_data", "conv2d_bwd_data", ["dout", "filters"], "ddata", backward_of="conv")
    b.op("conv_bwd_filter", "conv2d_bwd_filter", ["data", "dout"], "dfilters", backward_of="conv")
    return b.build()


def resnet(blocks: int = 100, batch: int = 8, channels: int = 8, size: int = 8,
           kernel: int = 2) -> dict[str, Any]:
    """Stack of residual conv blocks with backward pass and SGD updates.

    Each block has 15 ops, so the default has 1500 ops.
    """
    b = GraphBuilder()
    act = [batch, channels, size, size]
    filt = [channels, channels, kernel, kernel]
    x = b.tensor("x0", act, "input")
    block_inputs = [x]
    for n in range(blocks):
        p = f"b{n}_"
        w1 = b.tensor(p + "W1", filt, "weight")
        w2 = b.tensor(p + "W2", filt, "weight")
        c1 = b.tensor(p + "c1", act)
        a1 = b.tensor(p + "a1", act)
        c2 = b.tensor(p + "c2", act)
        s = b.tensor(p + "s", act)
        y = b.tensor(p + "y", act)
        b.op(p + "conv1", "conv2d", [x, w1], c1)
        b.op(p + "act1", "scale4", [c1], a1)
        b.op(p + "conv2", "conv2d", [a1, w2], c2)
        b.op(p + "skip", "add4", [c2, x], s)
        b.op(p + "act2", "scale4", [s], y)
        x = y
        block_inputs.append(y)
    dy = b.grad(x)
    for n in reversed(range(blocks)):
        p = f"b{n}_"
        xin = block_inputs[n]
        ds = b.grad(p + "s")
        b.op(p + "act2_bwd", "mul4", [dy, p + "s"], ds, backward_of=p + "act2")
        da1 = b.grad(p + "a1")
        b.op(p + "conv2_bwd_data", "conv2d_bwd_data", [ds, p + "W2"], da1, backward_of=p + "conv2")
        dw2 = b.grad(p + "W2")
        b.op(p + "conv2_bwd_filter", "conv2d_bwd_filter", [p + "a1", ds], dw2, backward_of=p + "conv2")
        dc1 = b.grad(p + "c1")
        b.op(p + "act1_bwd", "mul4", [da1, p + "c1"], dc1, backward_of=p + "act1")
        dx_main = b.tensor(p + "dx_main", act, "gradient", grad_of=xin)
        b.op(p + "conv1_bwd_data", "conv2d_bwd_data", [dc1, p + "W1"], dx_main, backward_of=p + "conv1")
        dw1 = b.grad(p + "W1")
        b.op(p + "conv1_bwd_filter", "conv2d_bwd_filter", [xin, dc1], dw1, backward_of=p + "conv1")
        dx_skip = b.tensor(p + "dx_skip", act, "gradient", grad_of=xin)
        b.op(p + "skip_bwd", "scale4", [ds], dx_skip, backward_of=p + "skip")
        dx = b.tensor(f"d{xin}", act, "gradient", grad_of=xin)
        b.op(p + "dx_sum", "add4", [dx_main, dx_skip], dx)
        for w, dw in ((p + "W1", dw1), (p + "W2", dw2)):
            b.op(p + "sgd_" + w[len(p):], "sgd4", [w, dw], b.tensor(w + "_new", filt, "weight"))
        dy = dx
    return b.build()
