"""Task placement: DP feasibility construction (IFS), MCMC search (ETP), and the
composed planner (DGTP).

IFS packs samplers, workers and PSs by count.  Tasks of one kind are treated as
interchangeable, using the element-wise maximum demand within the kind when
demands differ, so the DP never reports a packing that does not fit.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .engine import ScheduleRecord, simulate
from .model import (
    ClusterSpec,
    DependencyGraph,
    InfeasibleError,
    JobSpec,
    Placement,
    TaskKind,
    build_dependency_graph,
    check_placement,
    fits,
)
from .oes import OESPolicy
from .profiles import IterationDraw, Profile, derive_seed, draw_iterations

PACKED_KINDS = (TaskKind.SAMPLER, TaskKind.WORKER, TaskKind.PS)

DEFAULT_MU = 1.0
DEFAULT_BETA = 0.1
DEFAULT_BUDGET = 10000
DEFAULT_EST_ITERS = 20


# -- IFS ----------------------------------------------------------------------

Counts = Tuple[int, int, int]


@dataclass
class PackState:
    """Reachable count tuples after each machine, with one witness per tuple."""

    order: Tuple[int, ...]
    omega: List[Dict[Counts, Tuple[Counts, ...]]] = field(default_factory=list)
    expansions: int = 0


@dataclass(frozen=True)
class IFSResult:
    placement: Placement
    expansions: int
    bound: int
    eta: Counts
    order: Tuple[int, ...]
    omega_sizes: Tuple[int, ...]


def _kind_demand(job: JobSpec, kind: TaskKind, resources: Sequence[str]) -> Dict[str, float]:
    ids = job.of_kind(kind)
    return {r: max((float(job.tasks[j].demands.get(r, 0.0)) for j in ids), default=0.0)
            for r in resources}


def _residual(job: JobSpec, cluster: ClusterSpec) -> List[Dict[str, float]]:
    """Capacity left on each machine once its graph store is in place."""
    out = [{r: cluster.capacity(m, r) for r in cluster.resources} for m in range(cluster.n_machines)]
    for g, m in job.graph_store_pins.items():
        for r, w in job.tasks[g].demands.items():
            out[m][r] = out[m].get(r, 0.0) - w
    return out


def _eta(demand: Dict[str, float], residual: List[Dict[str, float]], total: int) -> int:
    needed = [r for r, w in demand.items() if w > 0]
    if not needed:
        return total  # free tasks: any machine hosts all of them
    best = 0
    for cap in residual:
        k = min(math.floor(max(cap.get(r, 0.0), 0.0) / demand[r] + 1e-9) for r in needed)
        best = max(best, k)
    return min(best, total)


def ifs_search(job: JobSpec, cluster: ClusterSpec, order_seed: Optional[int] = None) -> IFSResult:
    res = cluster.resources
    R = len(res)
    totals = tuple(len(job.of_kind(k)) for k in PACKED_KINDS)
    demand = [_kind_demand(job, k, res) for k in PACKED_KINDS]
    residual = _residual(job, cluster)
    for m, cap in enumerate(residual):
        if any(v < -1e-9 for v in cap.values()):
            raise InfeasibleError(f"graph store alone overflows machine {m}")
    eta = tuple(_eta(d, residual, n) for d, n in zip(demand, totals))
    order = list(range(cluster.n_machines))
    if order_seed is not None:
        random.Random(order_seed).shuffle(order)
    state = PackState(tuple(order))
    bound = (cluster.n_machines * math.prod(n + 1 for n in totals)
             * (math.prod(e + 1 for e in eta) + 1) * R)

    def packs(q: Counts, m: int) -> bool:
        state.expansions += R
        cap = residual[m]
        for r in res:
            use = sum(qk * d[r] for qk, d in zip(q, demand))
            if use > cap.get(r, 0.0) * (1 + 1e-9) + 1e-9:
                return False
        return True

    def local(limit: Counts) -> Iterator[Counts]:
        return itertools.product(*(range(min(e, l) + 1) for e, l in zip(eta, limit)))

    def finish(witness: Tuple[Counts, ...]) -> IFSResult:
        return IFSResult(_realise(job, witness, state.order), state.expansions, bound, eta,
                         state.order, tuple(len(o) for o in state.omega))

    first: Dict[Counts, Tuple[Counts, ...]] = {}
    state.omega.append(first)
    for q in local(totals):
        if packs(q, order[0]):
            first.setdefault(q, (q,))
            if q == totals:
                return finish((q,))
    for i in range(1, len(order)):
        m = order[i]
        prev, cur = state.omega[-1], {}
        state.omega.append(cur)
        for q, wit in prev.items():
            rest = tuple(t - x for t, x in zip(totals, q))
            if packs(rest, m):
                return finish(wit + (rest,))
            for qq in local(rest):
                if packs(qq, m):
                    key = tuple(a + b for a, b in zip(q, qq))
                    if key not in cur:
                        cur[key] = wit + (qq,)
    raise InfeasibleError(
        f"no capacity-feasible placement of {totals[0]} samplers, {totals[1]} workers, "
        f"{totals[2]} parameter servers on {cluster.n_machines} machines")


def _realise(job: JobSpec, witness: Sequence[Counts], order: Sequence[int]) -> Placement:
    assign = [-1] * len(job.tasks)
    for g, m in job.graph_store_pins.items():
        assign[g] = m
    for k, kind in enumerate(PACKED_KINDS):
        ids = iter(job.of_kind(kind))
        for counts, m in zip(witness, order):
            for _ in range(counts[k]):
                assign[next(ids)] = m
    return Placement(tuple(assign))


def ifs(job: JobSpec, cluster: ClusterSpec, order_seed: Optional[int] = None) -> Placement:
    """First capacity-feasible placement found by the count DP."""
    return ifs_search(job, cluster, order_seed).placement


def enumerate_placements(job: JobSpec, cluster: ClusterSpec) -> Iterator[Placement]:
    """Every assignment of the placeable tasks (graph stores stay pinned)."""
    movable = job.placeable
    base = [-1] * len(job.tasks)
    for g, m in job.graph_store_pins.items():
        base[g] = m
    for combo in itertools.product(range(cluster.n_machines), repeat=len(movable)):
        for j, m in zip(movable, combo):
            base[j] = m
        yield Placement(tuple(base))


# -- cost and estimation ------------------------------------------------------


def placement_cost(p: Placement, t_est: float, cluster: ClusterSpec, job: JobSpec) -> float:
    """Estimated makespan inflated by the summed fractional capacity overruns."""
    if not t_est > 0:
        raise ValueError("estimated makespan must be > 0")
    return t_est * (1.0 + check_placement(p, cluster, job).penalty_sum)


def estimate_makespan(p: Placement, job: JobSpec, cluster: ClusterSpec,
                      profile: Optional[Profile] = None, est_iters: int = DEFAULT_EST_ITERS, *,
                      draws: Optional[Sequence[IterationDraw]] = None,
                      graph: Optional[DependencyGraph] = None) -> float:
    if est_iters < 1:
        raise ValueError("est_iters must be >= 1")
    graph = graph or build_dependency_graph(job)
    if draws is None:
        if profile is None:
            raise ValueError("need a profile or explicit draws")
        draws = draw_iterations(profile, job, graph, est_iters)
    rec = simulate(job, cluster, p, OESPolicy(), draws=list(draws)[:est_iters], graph=graph,
                   record=False, require_feasible=False)
    return rec.makespan


# -- ETP ----------------------------------------------------------------------


@dataclass
class SearchState:
    current: Placement
    current_cost: float
    best: Placement
    best_makespan: float
    z: int = 0


@dataclass(frozen=True)
class TraceRow:
    z: int
    cost: float  # cost of the chain state after this transition (ms)
    accepted: bool
    feasible: bool
    best: float  # best strictly feasible makespan so far (ms)


@dataclass(frozen=True)
class ETPResult:
    placement: Placement
    makespan: float  # seconds, on the estimation draws
    initial: Placement
    trace: Tuple[TraceRow, ...]
    evaluations: int
    seed: int


def acceptance_probability(cost_now: float, cost_new: float, beta: float) -> float:
    return min(1.0, math.exp(min(0.0, beta * (cost_now - cost_new))))


def available_machines(p: Placement, j: int, job: JobSpec, cluster: ClusterSpec,
                       mu: float) -> List[int]:
    """Machines other than j's own that can take j under the relaxed capacities."""
    used = [dict.fromkeys(cluster.resources, 0.0) for _ in range(cluster.n_machines)]
    for t in job.tasks:
        row = used[p[t.id]]
        for r, w in t.demands.items():
            row[r] = row.get(r, 0.0) + w
    demand = job.tasks[j].demands
    return [m.id for m in cluster.machines
            if m.id != p[j] and fits(demand, used[m.id], m, mu)]


def etp_search(job: JobSpec, cluster: ClusterSpec, profile: Profile,
               budget: int = DEFAULT_BUDGET, mu: float = DEFAULT_MU, beta: float = DEFAULT_BETA,
               seed: int = 0, est_iters: int = DEFAULT_EST_ITERS,
               initial: Optional[Placement] = None,
               graph: Optional[DependencyGraph] = None) -> ETPResult:
    graph = graph or build_dependency_graph(job)
    # one draw sequence for every candidate (common random numbers)
    draws = draw_iterations(profile, job, graph, est_iters)
    y0 = initial if initial is not None else ifs(job, cluster, derive_seed(seed, "ifs"))
    if not check_placement(y0, cluster, job).overall_feasible:
        raise InfeasibleError("initial placement violates capacities")
    rng = random.Random(derive_seed(seed, "etp"))
    cache: Dict[Tuple[int, ...], Tuple[float, float, bool]] = {}

    def evaluate(p: Placement) -> Tuple[float, float, bool]:
        hit = cache.get(p.assign)
        if hit is None:
            t = estimate_makespan(p, job, cluster, draws=draws, est_iters=est_iters, graph=graph)
            rep = check_placement(p, cluster, job)
            hit = (t, t * 1e3 * (1.0 + rep.penalty_sum), rep.overall_feasible)
            cache[p.assign] = hit
        return hit

    t0, c0, _ = evaluate(y0)
    st = SearchState(y0, c0, y0, t0)
    movable = job.placeable
    trace: List[TraceRow] = []
    for z in range(budget):
        st.z = z
        j = movable[rng.randrange(len(movable))]
        avail = available_machines(st.current, j, job, cluster, mu)
        accepted = False
        if avail:
            cand = st.current.moved(j, avail[rng.randrange(len(avail))])
            t_new, c_new, feas = evaluate(cand)
            if rng.random() <= acceptance_probability(st.current_cost, c_new, beta):
                accepted = True
                st.current, st.current_cost = cand, c_new
                if feas and t_new < st.best_makespan:
                    st.best, st.best_makespan = cand, t_new
        trace.append(TraceRow(z, st.current_cost, accepted, cache[st.current.assign][2],
                              st.best_makespan * 1e3))
    return ETPResult(st.best, st.best_makespan, y0, tuple(trace), len(cache), seed)


def etp(job: JobSpec, cluster: ClusterSpec, profile: Profile, budget: int = DEFAULT_BUDGET,
        mu: float = DEFAULT_MU, beta: float = DEFAULT_BETA, seed: int = 0,
        est_iters: int = DEFAULT_EST_ITERS) -> Placement:
    return etp_search(job, cluster, profile, budget, mu, beta, seed, est_iters).placement


def multi_chain_search(job: JobSpec, cluster: ClusterSpec, profile: Profile, chains: int = 1,
                       seed: int = 0, **kw) -> ETPResult:
    """Independent chains with derived seeds; keeps the best feasible result."""
    results = [etp_search(job, cluster, profile, seed=derive_seed(seed, "chain", c) if chains > 1
                          else seed, **kw) for c in range(chains)]
    return min(results, key=lambda r: (r.makespan, r.seed))


# -- DGTP ---------------------------------------------------------------------


@dataclass(frozen=True)
class DGTPResult:
    placement: Placement
    record: ScheduleRecord
    search: ETPResult


def dgtp(job: JobSpec, cluster: ClusterSpec, profile: Profile, n_iterations: int,
         budget: int = DEFAULT_BUDGET, mu: float = DEFAULT_MU, beta: float = DEFAULT_BETA,
         seed: int = 0, est_iters: int = DEFAULT_EST_ITERS, chains: int = 1) -> DGTPResult:
    """Search a placement, then schedule the full run on it with the online scheduler."""
    search = multi_chain_search(job, cluster, profile, chains, seed, budget=budget, mu=mu,
                                beta=beta, est_iters=est_iters)
    rec = simulate(job, cluster, search.placement, OESPolicy(), profile, n_iterations)
    return DGTPResult(search.placement, rec, search)
