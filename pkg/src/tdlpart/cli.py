"""Command-line interface.

Exit status is 0 on success, 1 on usage or I/O errors and 2 when the input is
rejected (bad TDL, invalid graph, no feasible plan, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Any, Optional, Sequence

from . import __version__
from .errors import InconsistentPlan, ValidationError
from .graph import load_graph
from .materialize import PartitionedGraph, insert_control_deps, materialize, plan_memory
from .planner import RecursivePlan, brute_force_oracle, plan_from_json, recursive_partition
from .sim import Topology, simulate
from .strategies import discover_strategies
from .tdl import load_program


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 rather than argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _round(obj: Any) -> Any:
    if isinstance(obj, float):
        return float(f"{obj:.6g}")
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_round(obj), sort_keys=True, indent=2) + "\n"


def _emit(obj: Any, out: Optional[str]) -> None:
    text = dumps(obj)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _read_json(path: str) -> Any:
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise InconsistentPlan(f"{path}: invalid JSON: {e}") from None


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdlpart", description="Partition TDL dataflow graphs across workers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    a = sub.add_parser("analyze", help="list partition strategies of operators")
    a.add_argument("ops", help="TDL source file")
    a.add_argument("--op", help="only this operator")
    a.add_argument("--ways", type=int, default=2, help="split count (default 2)")

    pt = sub.add_parser("partition", help="find a partition plan")
    pt.add_argument("graph")
    pt.add_argument("--ops", help="TDL source (default: bundled corpus)")
    pt.add_argument("--workers", type=int, required=True)
    pt.add_argument("--out")

    m = sub.add_parser("materialize", help="expand a plan into a per-worker graph")
    m.add_argument("graph")
    m.add_argument("plan")
    m.add_argument("--ops", help="TDL source (default: bundled corpus)")
    m.add_argument("--dot", help="also write Graphviz DOT here")
    m.add_argument("--out")
    m.add_argument("--memory", help="also write the memory report here")

    s = sub.add_parser("simulate", help="account transfers on a topology")
    s.add_argument("pg")
    s.add_argument("plan")
    s.add_argument("--topology", required=True)
    s.add_argument("--out")

    o = sub.add_parser("oracle", help="exhaustive optimal plan (small graphs)")
    o.add_argument("graph")
    o.add_argument("--ops", help="TDL source (default: bundled corpus)")
    o.add_argument("--workers", type=int, required=True)
    o.add_argument("--max-size", type=int, default=2_000_000)
    o.add_argument("--out")
    return p


def _plan_numbers(data: Any) -> RecursivePlan:
    try:
        return RecursivePlan(int(data["workers"]), [int(f) for f in data["factors"]], [],
                             [int(c) for c in data["step_costs"]], int(data["total_cost"]))
    except (KeyError, TypeError, ValueError) as e:
        raise InconsistentPlan(f"malformed plan: {e}") from None


def _run(args: argparse.Namespace) -> None:
    if args.command == "analyze":
        if args.ways < 2:
            raise UsageError("--ways must be at least 2")
        prog = load_program(args.ops)
        names = [args.op] if args.op else list(prog)
        for n in names:
            if n not in prog:
                raise UsageError(f"no operator named {n!r} in {args.ops}")
        out = [s.to_json() for n in names for s in discover_strategies(prog[n], args.ways)]
        _emit(out, None)
    elif args.command in ("partition", "oracle"):
        if args.workers < 2:
            raise UsageError("--workers must be at least 2")
        g = load_graph(args.graph, load_program(args.ops))
        if args.command == "partition":
            plan = recursive_partition(g, args.workers)
        else:
            plan = brute_force_oracle(g, args.workers, args.max_size)
        _emit(plan.to_json(), args.out)
    elif args.command == "materialize":
        g = load_graph(args.graph, load_program(args.ops))
        plan = plan_from_json(g, _read_json(args.plan))
        pg = insert_control_deps(materialize(g, plan), g)
        if args.dot:
            with open(args.dot, "w", encoding="utf-8") as f:
                f.write(pg.to_dot())
        if args.memory:
            _emit(plan_memory(pg).to_json(), args.memory)
        _emit(pg.to_json(), args.out)
    elif args.command == "simulate":
        pg = PartitionedGraph.from_json(_read_json(args.pg))
        plan = _plan_numbers(_read_json(args.plan))
        topo = Topology.load(args.topology)
        report = simulate(pg, plan, topo, plan_memory(pg))
        _emit(report.to_json(), args.out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _run(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
