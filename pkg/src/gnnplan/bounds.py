"""Competitive-ratio machinery.

``extract_chain`` walks an online schedule backwards from the last task to
time zero through parts that start exactly when the previous one ends: a task,
the flow that delivered its last input, and (when that flow had to wait) the
previous-iteration flow of the same pair that blocked it.  Any valid schedule
must run the chain sequentially, so it yields a lower bound on the optimum;
the online rate guarantee yields an upper bound on the online makespan.

``brute_force_optimal`` solves the offline problem exactly on a tick grid as
a time-indexed MILP (HiGHS through :func:`scipy.optimize.milp`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from .engine import REL_TOL, ScheduleRecord, simulate
from .model import (
    ClusterSpec,
    DependencyGraph,
    FlowStatics,
    JobSpec,
    Placement,
    TaskKind,
    build_dependency_graph,
    one_iteration_flows,
)
from .profiles import IterationDraw


class ChainError(RuntimeError):
    """The schedule has an idle gap no dependency explains."""


class OracleRefusal(ValueError):
    pass


@dataclass(frozen=True)
class ChainPart:
    kind: str  # "task" or "flow"
    key: Tuple[int, ...]  # (j, n) or (src, dst, n)
    start: float
    end: float
    bits: float = 0.0
    src_m: int = -1
    dst_m: int = -1

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Chain:
    parts: Tuple[ChainPart, ...]  # in time order

    @property
    def p_sum(self) -> float:
        return sum(p.length for p in self.parts if p.kind == "task")

    @property
    def flows(self) -> List[ChainPart]:
        return [p for p in self.parts if p.kind == "flow"]

    @property
    def Q(self) -> int:
        return len(self.flows)

    @property
    def covered(self) -> float:
        return math.fsum(p.length for p in self.parts)


def extract_chain(record: ScheduleRecord, job: JobSpec, placement: Placement,
                  graph: Optional[DependencyGraph] = None) -> Chain:
    graph = graph or build_dependency_graph(job)
    N = record.n_iterations
    T = record.makespan
    tol = REL_TOL * max(T, 1e-12)
    starts, ends, spans = record.task_starts, record.task_ends, record.flow_spans
    pred = graph.pred

    def near(a, b):
        return abs(a - b) <= tol

    last = min(j for j in range(len(job.tasks)) if near(ends[(j, N)], T))
    parts: List[ChainPart] = []

    def task_part(occ):
        return ChainPart("task", occ, starts[occ], ends[occ])

    def flow_part(key):
        released, admitted, delivered = spans[key]
        return ChainPart("flow", key, admitted, delivered, record.flow_bits[key],
                         placement[key[0]], placement[key[1]])

    cur = (last, N)
    parts.append(task_part(cur))
    guard = 4 * len(job.tasks) * N + 4 * len(record.flow_spans) + 8
    while starts[cur] > tol:
        guard -= 1
        if guard < 0:
            raise ChainError("chain walk does not terminate")
        j, n = cur
        s = starts[cur]
        tasks, flows = [], []
        for i, delta in pred[j]:
            n_src = n - delta
            if n_src < 1:
                continue
            if placement[i] == placement[j]:
                if near(ends[(i, n_src)], s):
                    tasks.append((i, n_src))
            elif near(spans[(i, j, n_src)][2], s):
                flows.append((i, j, n_src))
        if n > 1 and near(ends[(j, n - 1)], s):
            tasks.append((j, n - 1))
        if tasks:
            cur = min(tasks)
            parts.append(task_part(cur))
            continue
        if not flows:
            raise ChainError(f"task ({job.tasks[j].label},{n}) starts at {s:.9g} "
                             "with no input arriving then")
        key = min(flows)
        while True:
            part = flow_part(key)
            parts.append(part)
            src, dst, n_src = key
            if near(ends[(src, n_src)], part.start):
                cur = (src, n_src)
                parts.append(task_part(cur))
                break
            blocker = (src, dst, n_src - 1)
            if n_src > 1 and blocker in spans and near(spans[blocker][2], part.start):
                key = blocker
                continue
            raise ChainError(f"flow {key} starts at {part.start:.9g}, explained neither by "
                             "its source nor by a blocking flow")
    parts.reverse()
    for a, b in zip(parts, parts[1:]):
        if not near(a.end, b.start):
            raise ChainError(f"gap between {a.key} and {b.key}")
    return Chain(tuple(parts))


def chain_lower_bound(chain: Chain, cluster: ClusterSpec) -> float:
    """Time the chain needs even if every flow on it had its NICs to itself."""
    total = chain.p_sum
    for f in chain.flows:
        if f.bits > 0:
            total += f.bits / min(cluster.machines[f.dst_m].bw_in, cluster.machines[f.src_m].bw_out)
    return total


def path_bound(chain: Chain, cluster: ClusterSpec, statics: FlowStatics) -> float:
    """Upper bound on the online makespan: chain flows at their guaranteed minimum rate."""
    total = chain.p_sum
    for f in chain.flows:
        if f.bits > 0:
            rate = min(cluster.machines[f.dst_m].bw_in / statics.deg_in[f.dst_m],
                       cluster.machines[f.src_m].bw_out / statics.deg_out[f.src_m])
            total += f.bits / rate
    return total


# -- exact offline optimum on a tick grid -------------------------------------

ORACLE_LIMITS = {"machines": 3, "tasks": 8, "iterations": 2}


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.lo, self.hi = [], [], [], [], []
        self.n = 0

    def add(self, coeffs: Dict[int, float], lo: float, hi: float):
        for c, v in coeffs.items():
            if v != 0:
                self.r.append(self.n)
                self.c.append(c)
                self.v.append(v)
        self.lo.append(lo)
        self.hi.append(hi)
        self.n += 1


def _ticks(x: float, tick: float, what: str) -> int:
    k = round(x / tick)
    if abs(k * tick - x) > 1e-9 * max(1.0, abs(x)):
        raise OracleRefusal(f"{what} = {x!r} s is not a multiple of the {tick} s tick")
    return int(k)


def brute_force_optimal(job: JobSpec, cluster: ClusterSpec, placement: Placement,
                        draws: Sequence[IterationDraw], tick: float,
                        horizon: Optional[float] = None, time_limit: float = 60.0) -> float:
    """Minimum makespan over all tick-aligned schedules (tasks start on ticks, flow
    amounts are per tick).  Returns seconds."""
    N = len(draws)
    if (cluster.n_machines > ORACLE_LIMITS["machines"] or len(job.tasks) > ORACLE_LIMITS["tasks"]
            or N > ORACLE_LIMITS["iterations"]):
        raise OracleRefusal(f"instance too large for exhaustive search: {cluster.n_machines} "
                            f"machines, {len(job.tasks)} tasks, {N} iterations")
    graph = build_dependency_graph(job)
    if horizon is None:
        horizon = _safe_horizon(job, cluster, placement, draws, graph, tick)
    H = int(math.ceil(horizon / tick - 1e-9))
    try:
        return _solve(job, cluster, placement, draws, graph, tick, H, time_limit)
    except _Infeasible:
        H2 = int(math.ceil(_safe_horizon(job, cluster, placement, draws, graph, tick) / tick))
        if H2 <= H:
            raise OracleRefusal("no schedule fits the horizon")
        return _solve(job, cluster, placement, draws, graph, tick, H2, time_limit)


class _Infeasible(Exception):
    pass


def _safe_horizon(job, cluster, placement, draws, graph, tick) -> float:
    # run everything back to back: every task, then every flow at full rate
    total = 0.0
    for d in draws:
        total += sum(math.ceil(x / tick - 1e-9) * tick for x in d.durations)
        for (s, t), v in d.volumes.items():
            if placement[s] != placement[t] and v > 0:
                b = min(cluster.machines[placement[s]].bw_out, cluster.machines[placement[t]].bw_in)
                total += math.ceil(8 * v / (b * tick) - 1e-9) * tick
    return total + tick


def _solve(job, cluster, placement, draws, graph, tick, H, time_limit) -> float:
    N = len(draws)
    J = len(job.tasks)
    P = {(j, n): _ticks(draws[n - 1].durations[j], tick, f"duration of task {j} iter {n}")
         for j in range(J) for n in range(1, N + 1)}
    var = 0
    xs: Dict[Tuple[int, int], List[int]] = {}
    for occ, p in P.items():
        if p > H:
            raise _Infeasible()
        xs[occ] = list(range(var, var + H - p + 1))  # start tick 0..H-p
        var += H - p + 1
    bw_max = max(max(m.bw_in, m.bw_out) for m in cluster.machines)
    unit = bw_max * tick  # bits per flow variable unit
    flows = []
    for s, d, delta in graph.edges:
        for n in range(1, N + 1):
            if n + delta > N:
                continue
            flows.append((s, d, n, n + delta, 8.0 * draws[n - 1].volumes[(s, d)]))
    ks: Dict[Tuple[int, int, int], List[int]] = {}
    cap: Dict[Tuple[int, int, int], float] = {}
    for s, d, n, n2, bits in flows:
        if placement[s] != placement[d] and bits > 0:
            ks[(s, d, n)] = list(range(var, var + H))
            var += H
            cap[(s, d, n)] = min(cluster.machines[placement[s]].bw_out,
                                 cluster.machines[placement[d]].bw_in) * tick / unit
    gates = {}
    for (s, d, n) in ks:
        if (s, d, n + 1) in ks:
            gates[(s, d, n)] = list(range(var, var + H))
            var += H
    c_var = var
    var += 1

    rows = _Rows()

    def started_by(occ, t):  # start tick <= t
        return {v: 1.0 for i, v in enumerate(xs[occ]) if i <= t}

    def done_by(occ, t):  # finish time <= t
        return {v: 1.0 for i, v in enumerate(xs[occ]) if i + P[occ] <= t}

    def minus(a, b):
        out = dict(a)
        for k, v in b.items():
            out[k] = out.get(k, 0.0) - v
        return out

    for occ, vs in xs.items():
        rows.add({v: 1.0 for v in vs}, 1, 1)
    for g in job.of_kind(TaskKind.GRAPH_STORE):
        rows.add({xs[(g, 1)][0]: 1.0}, 1, 1)
    for j in range(J):
        for n in range(1, N):
            for t in range(H + 1):
                rows.add(minus(started_by((j, n + 1), t), done_by((j, n), t)), -np.inf, 0)
    for s, d, n, n2, bits in flows:
        key = (s, d, n)
        if key not in ks:
            # colocated or empty: plain precedence
            for t in range(H + 1):
                rows.add(minus(started_by((d, n2), t), done_by((s, n), t)), -np.inf, 0)
            continue
        kv, c = ks[key], cap[key]
        rows.add({v: 1.0 for v in kv}, bits / unit, bits / unit)
        for t in range(H):
            # send in tick t only once the source is done and before the sink starts
            row = {kv[t]: 1.0}
            for v, w in done_by((s, n), t).items():
                row[v] = row.get(v, 0.0) - c
            rows.add(row, -np.inf, 0)
            row = {kv[t]: 1.0}
            for v, w in started_by((d, n2), t).items():
                row[v] = row.get(v, 0.0) + c
            rows.add(row, -np.inf, c)
    for key, gv in gates.items():
        nxt = (key[0], key[1], key[2] + 1)
        for t in range(H):
            rows.add({ks[key][t]: 1.0, gv[t]: cap[key]}, -np.inf, cap[key])
            rows.add({ks[nxt][t]: 1.0, gv[t]: -cap[nxt]}, -np.inf, 0)
            if t + 1 < H:
                rows.add({gv[t]: 1.0, gv[t + 1]: -1.0}, -np.inf, 0)
    for m in cluster.machines:
        out_keys = [k for k in ks if placement[k[0]] == m.id]
        in_keys = [k for k in ks if placement[k[1]] == m.id]
        for t in range(H):
            if out_keys:
                rows.add({ks[k][t]: 1.0 for k in out_keys}, -np.inf, m.bw_out * tick / unit)
            if in_keys:
                rows.add({ks[k][t]: 1.0 for k in in_keys}, -np.inf, m.bw_in * tick / unit)
    for j in range(J):
        occ = (j, N)
        row = {v: -(i + P[occ]) for i, v in enumerate(xs[occ])}
        row[c_var] = 1.0
        rows.add(row, 0, np.inf)

    A = sparse.csr_matrix((rows.v, (rows.r, rows.c)), shape=(rows.n, var))
    integrality = np.zeros(var)
    lb = np.zeros(var)
    ub = np.full(var, np.inf)
    for vs in xs.values():
        integrality[vs] = 1
        ub[vs] = 1
    for gv in gates.values():
        integrality[gv] = 1
        ub[gv] = 1
    cost = np.zeros(var)
    cost[c_var] = 1.0
    res = milp(cost, constraints=LinearConstraint(A, rows.lo, rows.hi), integrality=integrality,
               bounds=Bounds(lb, ub), options={"time_limit": time_limit, "mip_rel_gap": 0.0})
    if res.status == 2:
        raise _Infeasible()
    if res.status != 0:
        raise OracleRefusal(f"MILP did not reach a proven optimum: {res.message}")
    # the objective is an integer tick count
    return round(res.x[c_var]) * tick


# -- one-instance verification -----------------------------------------------


@dataclass(frozen=True)
class VerifyResult:
    delta: int
    t_oes: float
    t_lb: float
    t_path: float
    t_star: Optional[float]
    t_oes_grid: Optional[float]
    checks: Dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def ratio(self) -> Optional[float]:
        if self.t_star is None:
            return self.t_oes / self.t_lb if self.t_lb > 0 else 1.0
        return self.t_oes / self.t_star if self.t_star > 0 else 1.0


def verify_instance(job: JobSpec, cluster: ClusterSpec, placement: Placement,
                    draws: Sequence[IterationDraw], tick: Optional[float] = None) -> VerifyResult:
    from .oes import OESPolicy

    graph = build_dependency_graph(job)
    statics = one_iteration_flows(placement, graph, cluster.n_machines)
    delta = statics.delta
    bound = max(delta, 1)
    rec = simulate(job, cluster, placement, OESPolicy(), draws=draws, graph=graph)
    chain = extract_chain(rec, job, placement, graph)
    t_lb = chain_lower_bound(chain, cluster)
    t_path = path_bound(chain, cluster, statics)
    T = rec.makespan
    tol = REL_TOL * max(T, 1e-12)
    checks = {
        "chain_covers": abs(chain.covered - T) <= tol and abs(chain.parts[0].start) <= tol,
        "path_bound": T <= t_path + tol,
        "ratio_vs_lb": T <= bound * t_lb + tol,
    }
    t_star = t_grid = None
    if tick is not None:
        grid = simulate(job, cluster, placement, OESPolicy(), draws=draws, graph=graph, tick=tick)
        t_grid = grid.makespan
        t_star = brute_force_optimal(job, cluster, placement, draws, tick, horizon=t_grid + tick)
        stol = 1e-9 * max(t_star, 1.0)
        checks["ratio"] = T <= bound * t_star + stol
        checks["ratio_grid"] = t_grid <= bound * t_star + stol
        checks["lb_le_opt"] = t_lb <= t_star + stol
        checks["opt_le_online"] = t_star <= t_grid + stol
    return VerifyResult(delta, T, t_lb, t_path, t_star, t_grid, checks)
