"""Two-processor stage-graph simulation.

Processor ``A`` runs point manipulation (sampling, grouping); processor ``B``
runs neural networks (segmentation, PointNet, detection heads). The simulator
is a non-delay list scheduler: whenever a processor is free it starts the
ready stage that became ready first, ties broken by stage id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .errors import ArgumentError, ConfigurationError, MeasurementError

PROCESSORS = ("A", "B")


@dataclass(frozen=True)
class Stage:
    id: str
    proc: str
    duration: float
    deps: frozenset = frozenset()

    def __post_init__(self):
        if self.proc not in PROCESSORS:
            raise ConfigurationError(f"stage {self.id!r}: unknown processor {self.proc!r}")
        if not (self.duration >= 0 and self.duration != float("inf")):
            raise ConfigurationError(f"stage {self.id!r}: duration must be finite and >= 0")
        object.__setattr__(self, "deps", frozenset(self.deps))


class StageDag:
    """Stages keyed by id. Construction validates references and acyclicity."""

    def __init__(self, stages, transfer_ms: float = 0.0):
        self.stages = {}
        for s in stages:
            if s.id in self.stages:
                raise ConfigurationError(f"duplicate stage id {s.id!r}")
            self.stages[s.id] = s
        if transfer_ms < 0:
            raise ConfigurationError("transfer cost must be >= 0")
        self.transfer_ms = float(transfer_ms)
        for s in self.stages.values():
            missing = sorted(d for d in s.deps if d not in self.stages)
            if missing:
                raise ConfigurationError(f"stage {s.id!r} depends on unknown {missing}")
        self.order = self._topo_order()

    def __len__(self):
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages.values())

    def __getitem__(self, key):
        return self.stages[key]

    def edge_cost(self, src: str, dst: str) -> float:
        """Transfer delay on an edge; only charged when the processors differ."""
        if self.stages[src].proc != self.stages[dst].proc:
            return self.transfer_ms
        return 0.0

    def _topo_order(self):
        color = {sid: 0 for sid in self.stages}   # 0 new, 1 on stack, 2 done
        order = []
        for root in sorted(self.stages):
            if color[root]:
                continue
            stack = [(root, iter(sorted(self.stages[root].deps)))]
            path = [root]
            color[root] = 1
            while stack:
                sid, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    stack.pop()
                    path.pop()
                    color[sid] = 2
                    order.append(sid)
                elif color[nxt] == 1:
                    cycle = path[path.index(nxt):] + [nxt]
                    raise ConfigurationError(f"dependency cycle: {' -> '.join(reversed(cycle))}")
                elif color[nxt] == 0:
                    color[nxt] = 1
                    path.append(nxt)
                    stack.append((nxt, iter(sorted(self.stages[nxt].deps))))
        return order

    def to_dict(self):
        return {"transfer_ms": self.transfer_ms,
                "stages": [{"id": s.id, "proc": s.proc, "duration": s.duration,
                            "deps": sorted(s.deps)} for s in self.stages.values()]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageDag":
        try:
            stages = [Stage(str(s["id"]), s["proc"], float(s["duration"]), frozenset(s.get("deps", ())))
                      for s in d["stages"]]
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed stage graph: {exc}") from None
        return cls(stages, float(d.get("transfer_ms", 0.0)))


@dataclass
class Timeline:
    intervals: dict                   # id -> (start, end)
    procs: dict                       # id -> processor
    makespan: float
    busy: dict = field(default_factory=dict)
    idle: dict = field(default_factory=dict)
    ready: dict = field(default_factory=dict)   # id -> time its inputs were available

    def to_dict(self):
        rows = sorted(self.intervals.items(), key=lambda kv: (kv[1][0], kv[0]))
        return {"makespan": self.makespan, "busy": self.busy, "idle": self.idle,
                "stages": [{"id": sid, "proc": self.procs[sid], "start": s, "end": e}
                           for sid, (s, e) in rows]}

    def to_csv(self) -> str:
        lines = ["stage,start,end,proc"]
        for sid, (s, e) in sorted(self.intervals.items(), key=lambda kv: (kv[1][0], kv[0])):
            lines.append(f"{sid},{s!r},{e!r},{self.procs[sid]}")
        return "\n".join(lines) + "\n"


def simulate(dag: StageDag) -> Timeline:
    """Event-driven execution of ``dag`` on processors A and B."""
    ends = {}
    starts = {}
    ready_at = {}
    free_at = {p: 0.0 for p in PROCESSORS}
    pending = set(dag.stages)
    t = 0.0
    while pending:
        # stages whose dependencies are all scheduled have a known ready time
        for sid in pending:
            if sid not in ready_at and all(d in ends for d in dag[sid].deps):
                ready_at[sid] = max((ends[d] + dag.edge_cost(d, sid) for d in dag[sid].deps),
                                    default=0.0)
        started = False
        for proc in PROCESSORS:
            if free_at[proc] > t:
                continue
            cands = [sid for sid in pending
                     if sid in ready_at and ready_at[sid] <= t and dag[sid].proc == proc]
            if not cands:
                continue
            sid = min(cands, key=lambda s: (ready_at[s], s))
            starts[sid] = t
            ends[sid] = t + dag[sid].duration
            free_at[proc] = ends[sid]
            pending.discard(sid)
            started = True
        if started:
            # a zero-length stage may have released successors at this same instant
            continue
        future = [v for v in free_at.values() if v > t]
        future += [ready_at[s] for s in pending if s in ready_at and ready_at[s] > t]
        future += [ends[s] for s in ends if ends[s] > t]
        if not future:
            raise ConfigurationError(f"simulation stalled with pending stages {sorted(pending)}")
        t = min(future)
    makespan = max(ends.values(), default=0.0)
    busy = {p: 0.0 for p in PROCESSORS}
    for s in dag:
        busy[s.proc] += s.duration
    idle = {p: makespan - busy[p] for p in PROCESSORS}
    return Timeline({s: (starts[s], ends[s]) for s in starts},
                    {s.id: s.proc for s in dag}, makespan, busy, idle, dict(ready_at))


def critical_path(dag: StageDag) -> float:
    """Length of the longest duration-weighted dependency chain."""
    finish = {}
    for sid in dag.order:            # dependencies come first
        s = dag[sid]
        finish[sid] = s.duration + max((finish[d] + dag.edge_cost(d, sid) for d in s.deps),
                                       default=0.0)
    return max(finish.values(), default=0.0)


# -- pipelines ------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyProfile:
    seg_ms: float
    pm_ms: tuple               # point manipulation per SA layer (processor A)
    pn_ms: tuple               # PointNet per SA layer (processor B)
    head_ms: float = 0.0

    def __post_init__(self):
        pm, pn = tuple(map(float, self.pm_ms)), tuple(map(float, self.pn_ms))
        if len(pm) != len(pn) or not pm:
            raise ArgumentError("pm_ms and pn_ms need one entry per SA layer")
        if min((self.seg_ms, self.head_ms) + pm + pn) < 0:
            raise ArgumentError("latencies must be >= 0")
        object.__setattr__(self, "pm_ms", pm)
        object.__setattr__(self, "pn_ms", pn)

    @property
    def layers(self) -> int:
        return len(self.pm_ms)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatencyProfile":
        try:
            return cls(float(d["seg_ms"]), tuple(d["pm_ms"]), tuple(d["pn_ms"]),
                       float(d.get("head_ms", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ArgumentError(f"malformed latency profile: {exc}") from None

    def to_dict(self):
        return {"seg_ms": self.seg_ms, "pm_ms": list(self.pm_ms),
                "pn_ms": list(self.pn_ms), "head_ms": self.head_ms}


# Per-layer INT8 latencies measured with sequential pipelining (GPU, EdgeTPU).
REFERENCE_PROFILE = LatencyProfile(222.0, (199.0, 52.0, 25.0, 20.0), (47.0, 71.0, 84.0, 21.0), 0.0)


def build_naive(profile: LatencyProfile, transfer_ms: float = 0.0) -> StageDag:
    """seg -> pm_1 -> pn_1 -> ... -> pm_L -> pn_L -> head as a single chain."""
    stages = [Stage("seg", "B", profile.seg_ms)]
    prev = "seg"
    for layer, (pm, pn) in enumerate(zip(profile.pm_ms, profile.pn_ms), start=1):
        stages.append(Stage(f"pm_{layer}", "A", pm, frozenset({prev})))
        stages.append(Stage(f"pn_{layer}", "B", pn, frozenset({f"pm_{layer}"})))
        prev = f"pn_{layer}"
    stages.append(Stage("head", "B", profile.head_ms, frozenset({prev})))
    return StageDag(stages, transfer_ms)


def build_split(profile: LatencyProfile, split_factor: float = 0.5,
                transfer_ms: float = 0.0, pipelines=("normal", "bias")) -> StageDag:
    """Two half-size SA pipelines interleaved across the processors.

    The normal pipeline's first point manipulation starts immediately; the
    biased one waits for segmentation. Both first-layer PointNets consume the
    painted features and therefore also wait for segmentation.
    ``pipelines=("normal",)`` drops the biased pipeline.
    """
    if not 0 < split_factor <= 1:
        raise ArgumentError(f"split_factor must be in (0, 1], got {split_factor}")
    stages = [Stage("seg", "B", profile.seg_ms)]
    for p in pipelines:
        if p not in ("normal", "bias"):
            raise ArgumentError(f"unknown pipeline {p!r}")
        for layer, (pm, pn) in enumerate(zip(profile.pm_ms, profile.pn_ms), start=1):
            if layer == 1:
                pm_deps = frozenset() if p == "normal" else frozenset({"seg"})
                pn_deps = frozenset({f"pm_{p}_1", "seg"})
            else:
                pm_deps = frozenset({f"pn_{p}_{layer - 1}"})
                pn_deps = frozenset({f"pm_{p}_{layer}"})
            stages.append(Stage(f"pm_{p}_{layer}", "A", split_factor * pm, pm_deps))
            stages.append(Stage(f"pn_{p}_{layer}", "B", split_factor * pn, pn_deps))
    last = profile.layers
    stages.append(Stage("head", "B", profile.head_ms,
                        frozenset(f"pn_{p}_{last}" for p in pipelines)))
    return StageDag(stages, transfer_ms)


# -- communication estimate ---------------------------------------------------------

@dataclass(frozen=True)
class CommEstimate:
    t_total: float
    t2_total: float
    t_comp: float
    t_comm: float

    def to_dict(self):
        return {"t_total": self.t_total, "t2_total": self.t2_total,
                "t_comp": self.t_comp, "t_comm": self.t_comm}


def estimate_comm(t_total: float, t2_total: float) -> CommEstimate:
    """Split a latency into computation and communication.

    ``t2_total`` is the latency of a model with identical inputs, outputs and
    parameter count but twice the computation, so the difference of the two
    measurements is the computation time of the original.
    """
    if t_total < 0:
        raise MeasurementError("t_total must be >= 0")
    if t2_total < t_total:
        raise MeasurementError(f"t2_total ({t2_total}) < t_total ({t_total})")
    comp = t2_total - t_total
    comm = t_total - comp
    if comm < 0:
        raise MeasurementError(f"computation estimate {comp} exceeds total {t_total}")
    return CommEstimate(t_total, t2_total, comp, comm)


def load_profile(text: str) -> LatencyProfile:
    return LatencyProfile.from_dict(json.loads(text))
