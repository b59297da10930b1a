import heapq
import math
from typing import Dict, Iterable, Optional, Sequence, Tuple

import pytest

from gnnplan.engine import Flow, RateGroup, SimState
from gnnplan.model import (
    ClusterSpec,
    JobSpec,
    Machine,
    Placement,
    TaskKind,
    build_dependency_graph,
    make_job,
)
from gnnplan.profiles import IterationDraw

GBPS = 1e9
ROOMY = {"mem_gb": 1000.0, "cpu_cores": 1000.0, "gpus": 1000.0}


def cluster_of(bws: Sequence[Tuple[float, float]], caps: Optional[dict] = None) -> ClusterSpec:
    """Machines with (in, out) bandwidths given in Gbps."""
    return ClusterSpec(tuple(Machine(i, dict(caps or ROOMY), bi * GBPS, bo * GBPS)
                             for i, (bi, bo) in enumerate(bws)))


def const_draws(job: JobSpec, n_iterations: int, durations: Dict[TaskKind, float],
                volumes: Dict[str, float]) -> list:
    g = build_dependency_graph(job)
    durs = tuple(durations[t.kind] for t in job.tasks)
    vols = {(s, d): volumes[g.edge_class[(s, d)]] for s, d, _ in g.edges}
    return [IterationDraw(n, durs, dict(vols)) for n in range(1, n_iterations + 1)]


def state_with(job: JobSpec, cluster: ClusterSpec, placement: Placement, policy,
               flows: Iterable[Tuple[int, int, int, float]]) -> SimState:
    """A policy-ready state holding the given (src, dst, n, bits) flows, all admitted."""
    graph = build_dependency_graph(job)
    st = SimState(job, cluster, placement, graph, 2,
                  tuple(m.bw_in for m in cluster.machines),
                  tuple(m.bw_out for m in cluster.machines))
    policy.start(st)
    for seq, (s, d, n, bits) in enumerate(flows):
        f = Flow(s, d, n, placement[s], placement[d], bits, 0.0, seq)
        key = policy.group_key(f)
        g = st.active.get(key) or RateGroup(key, f.src_m, f.dst_m)
        f.admitted = 0.0
        f.group = g
        f.target = g.served + bits
        heapq.heappush(g.heap, (f.target, seq, f))
        st.active[key] = g
        st.in_flight[f.key] = f
    return st


def rates_of(st: SimState) -> Dict[Tuple[int, int, int], float]:
    return {f.key: f.group.rate for g in st.active.values() for _, _, f in g.heap}


def critical_path(job: JobSpec, draws) -> float:
    """Longest path through task occurrences when every transfer is free."""
    g = build_dependency_graph(job)
    N = len(draws)
    finish: Dict[Tuple[int, int], float] = {}
    order = _topo(job, g)
    for n in range(1, N + 1):
        for j in order:
            ready = finish.get((j, n - 1), 0.0)
            for s, d, delta in g.edges:
                if d == j and n - delta >= 1:
                    ready = max(ready, finish[(s, n - delta)])
            finish[(j, n)] = ready + draws[n - 1].durations[j]
    return max(finish[(j, N)] for j in range(len(job.tasks)))


def _topo(job, g):
    # within one iteration the edges with offset 0 form a DAG: stores, samplers, workers, PSs
    rank = {TaskKind.GRAPH_STORE: 0, TaskKind.SAMPLER: 1, TaskKind.WORKER: 2, TaskKind.PS: 3}
    return sorted(range(len(job.tasks)), key=lambda j: (rank[job.tasks[j].kind], j))


def close(a: float, b: float, rel: float = 1e-9) -> bool:
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-12)


@pytest.fixture
def minimal_job():
    # one store, one sampler, one worker, one PS
    return make_job(1, [1], 1)


# acceptance verdicts, one line per criterion, echoed at the end of the run
ACCEPTANCE: Dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
