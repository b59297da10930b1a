"""Event-driven execution of a placed job under a flow-scheduling policy.

Rates are piecewise constant between events (task finish, flow finish, flow
admission).  Flows are kept in *rate groups*: every member of a group always
shares one rate, which lets the degree-balanced scheduler track one virtual
service counter per machine pair instead of one per flow.

With ``tick`` set, the run follows discrete-time semantics instead: task
completions and flow deliveries only take effect on tick boundaries, and a
flow that drains mid-tick keeps its slot until the boundary.
"""

from __future__ import annotations

import bisect
import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    ClusterSpec,
    DependencyGraph,
    JobSpec,
    Placement,
    TaskKind,
    build_dependency_graph,
    check_placement,
)
from .profiles import IterationDraw, Profile, draw_iterations

REL_TOL = 1e-9
_DRAIN_TOL = 1e-12

OccKey = Tuple[int, int]  # (task, iteration)
FlowOcc = Tuple[int, int, int]  # (src task, dst task, source iteration)


class SimulationError(RuntimeError):
    pass


class RateViolation(SimulationError):
    pass


class SimulationTimeout(SimulationError):
    pass


class Flow:
    __slots__ = ("src", "dst", "n", "src_m", "dst_m", "bits", "released", "admitted",
                 "drained", "delivered", "target", "group", "seq")

    def __init__(self, src, dst, n, src_m, dst_m, bits, released, seq):
        self.src, self.dst, self.n = src, dst, n
        self.src_m, self.dst_m = src_m, dst_m
        self.bits = bits
        self.released = released
        self.admitted = None
        self.drained = None
        self.delivered = None
        self.target = 0.0
        self.group = None
        self.seq = seq

    @property
    def key(self) -> FlowOcc:
        return (self.src, self.dst, self.n)

    def __repr__(self):
        return f"Flow({self.src}->{self.dst}, n={self.n})"


class RateGroup:
    """Active flows that always share one rate; ``served`` is bits sent per member."""

    __slots__ = ("key", "src_m", "dst_m", "rate", "served", "heap", "draining",
                 "times", "rates")

    def __init__(self, key, src_m, dst_m):
        self.key = key
        self.src_m, self.dst_m = src_m, dst_m
        self.rate = 0.0
        self.served = 0.0
        self.heap: List[Tuple[float, int, Flow]] = []
        self.draining: List[Flow] = []
        self.times: List[float] = []
        self.rates: List[float] = []

    @property
    def size(self) -> int:
        return len(self.heap) + len(self.draining)

    @property
    def sending(self) -> int:
        return len(self.heap)

    def flows(self) -> List[Flow]:
        return sorted([f for _, _, f in self.heap] + self.draining, key=lambda f: f.key)

    def remaining(self, f: Flow) -> float:
        return max(f.target - self.served, 0.0) if f.drained is None else 0.0


class SchedulerPolicy:
    """Hooks the engine calls; subclasses decide admission and rates."""

    name = "abstract"

    def group_key(self, flow: Flow) -> Hashable:
        return flow.key

    def start(self, state: "SimState") -> None:
        pass

    def on_release(self, flow: Flow, state: "SimState") -> bool:
        """Return True to admit the flow now, False if the policy holds it."""
        return True

    def on_flow_done(self, flow: Flow, state: "SimState") -> List[Flow]:
        return []

    def on_admit(self, flow: Flow, state: "SimState") -> None:
        pass

    def assign_rates(self, state: "SimState") -> None:
        raise NotImplementedError


@dataclass
class SimState:
    """What a policy may look at: the clock, placement, NICs and live flows."""

    job: JobSpec
    cluster: ClusterSpec
    placement: Placement
    graph: DependencyGraph
    n_iterations: int
    bw_in: Tuple[float, ...]
    bw_out: Tuple[float, ...]
    clock: float = 0.0
    active: Dict[Hashable, RateGroup] = field(default_factory=dict)
    in_flight: Dict[FlowOcc, Flow] = field(default_factory=dict)

    def active_flows(self) -> List[Flow]:
        out = []
        for g in self.active.values():
            out.extend(g.flows())
        out.sort(key=lambda f: f.key)
        return out

    def remaining(self, f: Flow) -> float:
        return f.group.remaining(f) if f.group is not None else f.bits


@dataclass
class ScheduleRecord:
    n_iterations: int
    task_starts: Dict[OccKey, float]
    task_ends: Dict[OccKey, float]
    # (src, dst, n) -> [(t0, t1, rate bits/s)], rates > 0
    flow_segments: Dict[FlowOcc, List[Tuple[float, float, float]]]
    # (src, dst, n) -> (released, admitted, delivered)
    flow_spans: Dict[FlowOcc, Tuple[float, float, float]]
    flow_bits: Dict[FlowOcc, float]
    # change points: (t, rates into each machine, rates out of each machine)
    nic_util: List[Tuple[float, Tuple[float, ...], Tuple[float, ...]]]
    makespan: float
    events: int = 0
    policy: str = ""
    tick: Optional[float] = None


class Simulator:
    def __init__(self, job: JobSpec, cluster: ClusterSpec, placement: Placement,
                 policy: SchedulerPolicy, draws: Sequence[IterationDraw], *,
                 graph: Optional[DependencyGraph] = None, tick: Optional[float] = None,
                 record: bool = True, max_events: Optional[int] = None):
        self.job = job
        self.cluster = cluster
        self.placement = placement
        self.policy = policy
        self.draws = list(draws)
        self.N = len(self.draws)
        if self.N < 1:
            raise SimulationError("need at least one iteration of draws")
        self.graph = graph or build_dependency_graph(job)
        self.tick = tick
        self.record = record
        n_edges = len(self.graph.edges)
        self.max_events = max_events or 20 * (len(job.tasks) + n_edges) * self.N + 1000
        self.state = SimState(job, cluster, placement, self.graph, self.N,
                              tuple(m.bw_in for m in cluster.machines),
                              tuple(m.bw_out for m in cluster.machines))

    # -- time helpers ---------------------------------------------------
    def _grid(self, x: float) -> float:
        if self.tick is None:
            return x
        return math.ceil(x / self.tick - 1e-9) * self.tick

    def run(self) -> ScheduleRecord:
        job, P, N = self.job, self.placement, self.N
        st = self.state
        succ = self.graph.succ
        offsets = {(s, d): delta for s, d, delta in self.graph.edges}
        need: Dict[OccKey, int] = {}
        pred_delta: Dict[int, List[int]] = {j: [] for j in range(len(job.tasks))}
        for s, d, delta in self.graph.edges:
            pred_delta[d].append(delta)
        for n in range(1, N + 1):
            for j in range(len(job.tasks)):
                need[(j, n)] = sum(1 for delta in pred_delta[j] if n - delta >= 1) + (n > 1)

        starts: Dict[OccKey, float] = {}
        ends: Dict[OccKey, float] = {}
        task_heap: List[Tuple[float, int, int]] = []
        due: List[Tuple[float, FlowOcc, Flow]] = []
        all_flows: Dict[FlowOcc, Flow] = {}
        groups: Dict[Hashable, RateGroup] = {}
        ready: List[OccKey] = []
        nic_util = []
        seq = 0
        events = 0
        t = 0.0
        remaining_occ = len(job.tasks) * N
        policy = self.policy
        policy.start(st)

        def satisfy(occ: OccKey):
            need[occ] -= 1
            if need[occ] == 0:
                ready.append(occ)

        def admit(f: Flow):
            if f.bits <= 0:
                # empty transfers complete the moment they are admitted
                f.admitted = f.drained = t
                heapq.heappush(due, (t, f.key, f))
                return
            key = policy.group_key(f)
            g = groups.get(key)
            if g is None:
                g = groups[key] = RateGroup(key, f.src_m, f.dst_m)
            f.admitted = t
            f.group = g
            f.target = g.served + f.bits
            heapq.heappush(g.heap, (f.target, f.seq, f))
            st.active[key] = g
            policy.on_admit(f, st)

        def deliver(f: Flow):
            f.delivered = t
            del st.in_flight[f.key]
            g = f.group
            if g is not None:
                g.draining.remove(f)
                if g.size == 0:
                    del st.active[g.key]
            satisfy((f.dst, f.n + offsets[(f.src, f.dst)]))
            for nxt in policy.on_flow_done(f, st):
                admit(nxt)

        # only graph stores have no inputs in iteration 1
        ready.extend((j, 1) for j in range(len(job.tasks)) if need[(j, 1)] == 0)

        while True:
            # settle everything that happens at instant t
            while True:
                progressed = False
                batch = []
                while due and due[0][0] <= t:
                    batch.append(heapq.heappop(due))
                batch.sort(key=lambda e: e[1])
                for _, _, f in batch:
                    deliver(f)
                    progressed = True
                finished = []
                while task_heap and task_heap[0][0] <= t:
                    _, j, n = heapq.heappop(task_heap)
                    finished.append((j, n))
                finished.sort()
                for j, n in finished:
                    progressed = True
                    remaining_occ -= 1
                    if n < N:
                        satisfy((j, n + 1))
                    for d, delta in succ[j]:
                        n2 = n + delta
                        if n2 > N:
                            continue
                        vol = self.draws[n - 1].volumes[(j, d)]
                        if P[j] == P[d]:
                            satisfy((d, n2))
                            continue
                        f = Flow(j, d, n, P[j], P[d], 8.0 * vol, t, seq)
                        seq += 1
                        all_flows[f.key] = f
                        st.in_flight[f.key] = f
                        if policy.on_release(f, st):
                            admit(f)
                if ready:
                    ready.sort()
                    batch_ready, ready[:] = list(ready), []
                    for j, n in batch_ready:
                        progressed = True
                        starts[(j, n)] = t
                        dur = self.draws[n - 1].durations[j]
                        ends[(j, n)] = t + dur
                        heapq.heappush(task_heap, (self._grid(t + dur), j, n))
                events += 1
                if events > self.max_events:
                    raise SimulationTimeout(f"more than {self.max_events} events; "
                                            "the run does not terminate")
                if not progressed:
                    break

            if remaining_occ == 0:
                break

            st.clock = t
            active = st.active
            if active:
                policy.assign_rates(st)
            loads = self._check_rates(st)

            # next event; groups remember their head's finish time
            t_next = math.inf
            if task_heap:
                t_next = task_heap[0][0]
            if due and due[0][0] < t_next:
                t_next = due[0][0]
            moving = []
            for g in active.values():
                if self.record:
                    if g.times and g.times[-1] == t:
                        g.rates[-1] = g.rate
                    elif not g.rates or g.rates[-1] != g.rate:
                        g.times.append(t)
                        g.rates.append(g.rate)
                if g.heap and g.rate > 0:
                    tf = t + (g.heap[0][0] - g.served) / g.rate
                    moving.append((g, tf))
                    if tf < t_next:
                        t_next = tf
            if self.record:
                self._log_nic(nic_util, t, loads)
            if t_next == math.inf:
                stuck = sorted(st.in_flight)
                raise SimulationError(f"schedule stalled at t={t:.9g}; in-flight flows {stuck[:5]}")
            t_next = max(t_next, t)
            dt = t_next - t
            t = t_next
            for g, tf in moving:
                if tf <= t:
                    # snap so the head drains exactly; members share the counter
                    g.served = max(g.served + g.rate * dt, g.heap[0][0])
                else:
                    g.served += g.rate * dt
                heap = g.heap
                while heap and heap[0][0] - g.served <= _DRAIN_TOL * heap[0][0]:
                    _, _, f = heapq.heappop(heap)
                    f.drained = t
                    g.draining.append(f)
                    heapq.heappush(due, (self._grid(t), f.key, f))

        makespan = max((ends[(j, N)] for j in range(len(job.tasks))), default=0.0)
        segments: Dict[FlowOcc, List[Tuple[float, float, float]]] = {}
        spans = {}
        bits = {}
        for key in sorted(all_flows):
            f = all_flows[key]
            spans[key] = (f.released, f.admitted, f.delivered)
            bits[key] = f.bits
            if self.record:
                segments[key] = _segments(f)
        return ScheduleRecord(N, starts, ends, segments, spans, bits, nic_util, makespan,
                              events, policy.name, self.tick)

    def _check_rates(self, st: SimState) -> Tuple[List[float], List[float]]:
        M = self.cluster.n_machines
        load_in = [0.0] * M
        load_out = [0.0] * M
        for g in st.active.values():
            r = g.rate
            if not r >= 0:
                raise RateViolation(f"policy {self.policy.name} set rate {r} on {g.key}")
            if r:
                x = r * len(g.heap)
                load_out[g.src_m] += x
                load_in[g.dst_m] += x
        bw_in, bw_out = st.bw_in, st.bw_out
        for m in range(M):
            if load_in[m] > bw_in[m] * (1 + REL_TOL):
                raise RateViolation(f"t={st.clock:.9g}: ingress of machine {m} at "
                                    f"{load_in[m]:.9g} > {bw_in[m]:.9g} bit/s")
            if load_out[m] > bw_out[m] * (1 + REL_TOL):
                raise RateViolation(f"t={st.clock:.9g}: egress of machine {m} at "
                                    f"{load_out[m]:.9g} > {bw_out[m]:.9g} bit/s")
        return load_in, load_out

    @staticmethod
    def _log_nic(log, t, loads):
        row = (t, tuple(loads[0]), tuple(loads[1]))
        if log and log[-1][0] == t:
            log[-1] = row
        elif not log or log[-1][1:] != row[1:]:
            log.append(row)


def _segments(f: Flow) -> List[Tuple[float, float, float]]:
    g = f.group
    if g is None or f.drained is None or f.drained <= f.admitted:
        return []
    times, rates = g.times, g.rates
    i = bisect.bisect_right(times, f.admitted) - 1
    out: List[Tuple[float, float, float]] = []
    while i < len(times):
        t0 = max(times[i], f.admitted)
        t1 = times[i + 1] if i + 1 < len(times) else math.inf
        t1 = min(t1, f.drained)
        if t1 > t0 and rates[i] > 0:
            if out and out[-1][2] == rates[i] and out[-1][1] == t0:
                out[-1] = (out[-1][0], t1, rates[i])
            else:
                out.append((t0, t1, rates[i]))
        if t1 >= f.drained:
            break
        i += 1
    return out


def simulate(job: JobSpec, cluster: ClusterSpec, placement: Placement,
             policy: SchedulerPolicy, profile: Optional[Profile] = None,
             n_iterations: Optional[int] = None, *,
             draws: Optional[Sequence[IterationDraw]] = None,
             graph: Optional[DependencyGraph] = None, tick: Optional[float] = None,
             record: bool = True, require_feasible: bool = True,
             max_events: Optional[int] = None) -> ScheduleRecord:
    """Run ``n_iterations`` of the job; draws come from ``profile`` unless given."""
    graph = graph or build_dependency_graph(job)
    rep = check_placement(placement, cluster, job)
    if require_feasible and not rep.overall_feasible:
        raise SimulationError(f"placement violates capacities: {rep.violations()[:3]}")
    if draws is None:
        if profile is None:
            raise SimulationError("need a profile or explicit draws")
        draws = draw_iterations(profile, job, graph, n_iterations or job.n_iterations)
    elif n_iterations is not None:
        draws = list(draws)[:n_iterations]
    sim = Simulator(job, cluster, placement, policy, draws, graph=graph, tick=tick,
                    record=record, max_events=max_events)
    return sim.run()


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    constraint: str
    detail: str
    time: Optional[float] = None

    def __str__(self):
        at = f" at t={self.time:.9g}" if self.time is not None else ""
        return f"[{self.constraint}]{at} {self.detail}"


def _close_ge(a: float, b: float, scale: float) -> bool:
    return a >= b - REL_TOL * max(scale, 1e-12)


def validate(record: ScheduleRecord, job: JobSpec, cluster: ClusterSpec, placement: Placement,
             draws: Sequence[IterationDraw], graph: Optional[DependencyGraph] = None) -> List[Violation]:
    """Check a record against the full constraint system; empty list means valid."""
    graph = graph or build_dependency_graph(job)
    N = record.n_iterations
    out: List[Violation] = []
    scale = max(record.makespan, 1e-9)
    starts, ends = record.task_starts, record.task_ends
    name = lambda j: job.tasks[j].label  # noqa: E731

    for j in job.of_kind(TaskKind.GRAPH_STORE):
        s = starts.get((j, 1))
        if s is None or abs(s) > REL_TOL * scale:
            out.append(Violation("store_start", f"graph store {name(j)} iteration 1 starts at {s}"))
    for j in range(len(job.tasks)):
        for n in range(1, N + 1):
            if (j, n) not in starts:
                out.append(Violation("duration", f"({name(j)},{n}) never started"))
                continue
            dur = draws[n - 1].durations[j]
            if abs(ends[(j, n)] - starts[(j, n)] - dur) > REL_TOL * scale:
                out.append(Violation("duration", f"({name(j)},{n}) runs {ends[(j, n)] - starts[(j, n)]:.9g}"
                                            f" s, drawn {dur:.9g} s"))
    extra = [k for k in starts if not (0 <= k[0] < len(job.tasks) and 1 <= k[1] <= N)]
    for k in extra:
        out.append(Violation("duration", f"unexpected task occurrence {k}"))
    if out:
        return out

    # inter-iteration task order
    for j in range(len(job.tasks)):
        for n in range(1, N):
            if not _close_ge(starts[(j, n + 1)], ends[(j, n)], scale):
                out.append(Violation("iteration_order", f"({name(j)},{n + 1}) starts before ({name(j)},{n}) ends",
                                     starts[(j, n + 1)]))

    segs = record.flow_segments
    bw_events: Tuple[List[float], ...] = ([], [], [], [], [])  # t0, t1, rate, src, dst
    for s, d, delta in graph.edges:
        ms, md = placement[s], placement[d]
        remote = ms != md
        last_end = -math.inf  # end of the pair's latest non-empty flow so far
        for n in range(1, N + 1):
            n2 = n + delta
            if n2 > N:
                continue
            key = (s, d, n)
            label = f"({name(s)},{n})->({name(d)},{n2})"
            if not remote:
                if not _close_ge(starts[(d, n2)], ends[(s, n)], scale):
                    out.append(Violation("colocated_order", f"{label}: colocated successor starts early",
                                         starts[(d, n2)]))
                continue
            vol_bits = 8.0 * draws[n - 1].volumes[(s, d)]
            fs = segs.get(key, [])
            if vol_bits <= 0:
                if not _close_ge(starts[(d, n2)], ends[(s, n)], scale):
                    out.append(Violation("successor_after_flow", f"{label}: successor starts before source ends",
                                         starts[(d, n2)]))
                continue
            if not fs:
                out.append(Violation("volume", f"{label}: no transmission recorded"))
                continue
            sent = 0.0
            prev_end = -math.inf
            for t0, t1, rate in fs:
                if rate <= 0 or t1 < t0:
                    out.append(Violation("volume", f"{label}: bad segment ({t0}, {t1}, {rate})", t0))
                if t0 < prev_end - REL_TOL * scale:
                    out.append(Violation("volume", f"{label}: overlapping segments", t0))
                prev_end = t1
                sent += (t1 - t0) * rate
            for col, vals in zip(bw_events, zip(*fs)):
                col.extend(vals)
            bw_events[3].extend([ms] * len(fs))
            bw_events[4].extend([md] * len(fs))
            if abs(sent - vol_bits) > REL_TOL * vol_bits:
                out.append(Violation("volume", f"{label}: sent {sent:.12g} bits, volume {vol_bits:.12g}"))
            first, last = fs[0][0], fs[-1][1]
            if not _close_ge(first, ends[(s, n)], scale):
                out.append(Violation("flow_after_source", f"{label}: flow starts before its source ends", first))
            if not _close_ge(starts[(d, n2)], last, scale):
                out.append(Violation("successor_after_flow", f"{label}: successor starts before the flow ends",
                                     starts[(d, n2)]))
            if not _close_ge(first, last_end, scale):
                out.append(Violation("pair_order", f"{label}: overlaps an earlier iteration's flow",
                                     first))
            last_end = last

    out.extend(_check_bandwidth(bw_events, cluster, scale))
    last = max((ends[(j, N)] for j in range(len(job.tasks))), default=0.0)
    if abs(last - record.makespan) > REL_TOL * scale:
        out.append(Violation("makespan", f"makespan {record.makespan:.9g} != last finish {last:.9g}"))
    return out


# rates are summed as integers in units of 2**-20 bit/s: exact, and far below
# the relative tolerance for any realistic bandwidth
_RATE_QUANTUM = float(2 ** 20)


def _check_bandwidth(events, cluster: ClusterSpec, scale: float) -> List[Violation]:
    if not events[0]:
        return []
    t0, t1, rate, src, dst = (np.array(c) for c in events)
    q = np.rint(rate * _RATE_QUANTUM).astype(np.int64)
    tol = REL_TOL * scale * 1e-3
    out = []
    for side, owner, code in (("in", dst, "ingress"), ("out", src, "egress")):
        for m in np.unique(owner):
            sel = owner == m
            k = int(sel.sum())
            times = np.concatenate([t1[sel], t0[sel]])
            # ends sort before starts at equal times
            kinds = np.concatenate([np.zeros(k), np.ones(k)])
            delta = np.concatenate([-q[sel], q[sel]])
            order = np.lexsort((kinds, times))
            times = times[order]
            load = np.cumsum(delta[order])
            settled = np.append(np.diff(times) > tol, True)
            m = int(m)
            cap = cluster.machines[m].bw_in if side == "in" else cluster.machines[m].bw_out
            for i in np.nonzero(settled & (load > cap * (1 + REL_TOL) * _RATE_QUANTUM))[0]:
                out.append(Violation(code, f"{side}bound traffic at machine {m} is "
                                         f"{load[i] / _RATE_QUANTUM:.9g} > {cap:.9g} bit/s",
                                     float(times[i])))
    out.sort(key=lambda v: (v.time, v.constraint, v.detail))
    return out
