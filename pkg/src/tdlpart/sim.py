"""Transfer accounting of a partitioned graph on a hierarchical interconnect."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence, Union

from .errors import TopologyMismatch
from .materialize import MemoryPlan, PartitionedGraph, worker_digits
from .planner import RecursivePlan


@dataclass(frozen=True)
class Level:
    fanout: int
    bandwidth: float  # bytes per second


@dataclass(frozen=True)
class Topology:
    """Interconnect levels listed from the root down to the leaves."""

    levels: tuple[Level, ...]

    @property
    def workers(self) -> int:
        return math.prod(l.fanout for l in self.levels)

    @property
    def fanouts(self) -> list[int]:
        return [l.fanout for l in self.levels]

    def level_of(self, a: int, b: int) -> int:
        """Index of the level whose link joins workers ``a`` and ``b``."""
        da, db = worker_digits(a, self.fanouts), worker_digits(b, self.fanouts)
        for i, (x, y) in enumerate(zip(da, db)):
            if x != y:
                return i
        raise ValueError("a worker does not transfer to itself")

    @staticmethod
    def from_json(data: Mapping[str, Any]) -> "Topology":
        try:
            levels = tuple(Level(int(l["fanout"]), float(l["bandwidth"])) for l in data["levels"])
        except (KeyError, TypeError, ValueError) as e:
            raise TopologyMismatch(f"malformed topology: {e}") from None
        topo = Topology(levels)
        topo.validate()
        return topo

    @staticmethod
    def load(source: Union[str, Mapping[str, Any]]) -> "Topology":
        if isinstance(source, Mapping):
            return Topology.from_json(source)
        with open(source, encoding="utf-8") as f:
            return Topology.from_json(json.load(f))

    @staticmethod
    def uniform(fanouts: Sequence[int], bandwidths: Sequence[float]) -> "Topology":
        return Topology(tuple(Level(f, b) for f, b in zip(fanouts, bandwidths)))

    def validate(self) -> None:
        if not self.levels:
            raise TopologyMismatch("topology needs at least one level")
        for l in self.levels:
            if l.fanout < 1 or l.bandwidth <= 0:
                raise TopologyMismatch("fanouts must be >= 1 and bandwidths positive")
        bws = [l.bandwidth for l in self.levels]
        if any(a > b for a, b in zip(bws, bws[1:])):
            raise TopologyMismatch("bandwidth must not decrease from the root towards the leaves")

    def to_json(self) -> dict:
        return {"levels": [{"fanout": l.fanout, "bandwidth": l.bandwidth} for l in self.levels]}


def weighted_time(level_bytes: Sequence[float], topo: Topology) -> float:
    return sum(b / l.bandwidth for b, l in zip(level_bytes, topo.levels))


@dataclass
class SimReport:
    step_bytes: list[int]
    plan_step_costs: list[int]
    level_bytes: list[int]
    link_bytes: dict[tuple[int, int], int]
    total_bytes: int
    plan_total_cost: int
    time: float
    peak_memory: Optional[list[int]] = None

    @property
    def consistent(self) -> bool:
        return self.total_bytes == self.plan_total_cost

    def to_json(self) -> dict:
        out = {
            "step_bytes": self.step_bytes,
            "plan_step_costs": self.plan_step_costs,
            "level_bytes": self.level_bytes,
            "link_bytes": [{"source": a, "destination": b, "bytes": n}
                           for (a, b), n in sorted(self.link_bytes.items())],
            "total_bytes": self.total_bytes,
            "plan_total_cost": self.plan_total_cost,
            "consistent": self.consistent,
            "time": self.time,
        }
        if self.peak_memory is not None:
            out["peak_memory"] = [{"worker": w, "peak_bytes": b} for w, b in enumerate(self.peak_memory)]
        return out


def simulate(pg: PartitionedGraph, plan: RecursivePlan, topo: Topology,
             memory: Optional[MemoryPlan] = None) -> SimReport:
    """Attribute every materialized transfer to a plan step and a topology level."""
    topo.validate()
    if topo.workers != pg.workers:
        raise TopologyMismatch(
            f"topology has {topo.workers} workers but the partitioned graph has {pg.workers}")
    if plan.workers != pg.workers:
        raise TopologyMismatch(f"plan is for {plan.workers} workers, graph for {pg.workers}")
    factors = list(pg.factors)
    step_bytes = [0] * len(factors)
    level_bytes = [0] * len(topo.levels)
    links: dict[tuple[int, int], int] = {}
    for src, dst, nbytes in pg.transfers():
        ds, dd = worker_digits(src, factors), worker_digits(dst, factors)
        step = next(i for i, (x, y) in enumerate(zip(ds, dd)) if x != y)
        step_bytes[step] += nbytes
        level_bytes[topo.level_of(src, dst)] += nbytes
        links[(src, dst)] = links.get((src, dst), 0) + nbytes
    total = sum(step_bytes)
    peaks = [w.peak_bytes for w in memory.workers] if memory is not None else None
    return SimReport(step_bytes, list(plan.step_costs), level_bytes, links, total,
                     plan.total_cost, weighted_time(level_bytes, topo), peaks)
