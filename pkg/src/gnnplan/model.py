"""Domain types for clusters, jobs and placements.

Tasks are indexed densely ``0..|J|-1``; machines ``0..M-1``.  Times are
seconds, bandwidths bits per second, traffic volumes bytes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

DEFAULT_RESOURCES = ("mem_gb", "cpu_cores", "gpus")

# (src task, dst task); a flow occurrence adds the source iteration.
FlowKey = Tuple[int, int]

_CAP_TOL = 1e-9


class StructureError(ValueError):
    """Malformed cluster, job or placement."""


class InfeasibleError(ValueError):
    """No placement satisfies the capacity constraints."""


class TaskKind(str, enum.Enum):
    GRAPH_STORE = "graph_store"
    SAMPLER = "sampler"
    WORKER = "worker"
    PS = "ps"


# flow classes, keyed by (src kind, dst kind)
EDGE_CLASSES = {
    (TaskKind.GRAPH_STORE, TaskKind.SAMPLER): "gs_to_sampler",
    (TaskKind.SAMPLER, TaskKind.WORKER): "sampler_to_worker",
    (TaskKind.WORKER, TaskKind.PS): "worker_to_ps",
    (TaskKind.PS, TaskKind.WORKER): "ps_to_worker",
}
FLOW_CLASSES = tuple(EDGE_CLASSES.values())


@dataclass(frozen=True)
class Machine:
    id: int
    capacities: Mapping[str, float]
    bw_in: float
    bw_out: float

    def __post_init__(self):
        if any(v < 0 for v in self.capacities.values()):
            raise StructureError(f"machine {self.id}: negative capacity")
        if not (self.bw_in > 0 and self.bw_out > 0):
            raise StructureError(f"machine {self.id}: bandwidth must be > 0")


@dataclass(frozen=True)
class ClusterSpec:
    machines: Tuple[Machine, ...]

    def __post_init__(self):
        if not self.machines:
            raise StructureError("cluster has no machines")
        for i, m in enumerate(self.machines):
            if m.id != i:
                raise StructureError(f"machine ids must be 0..M-1, got {m.id} at {i}")

    @property
    def n_machines(self) -> int:
        return len(self.machines)

    @property
    def resources(self) -> Tuple[str, ...]:
        names: Dict[str, None] = {}
        for m in self.machines:
            names.update(dict.fromkeys(m.capacities))
        return tuple(names)

    def capacity(self, m: int, r: str) -> float:
        return float(self.machines[m].capacities.get(r, 0.0))


@dataclass(frozen=True)
class TaskSpec:
    id: int
    kind: TaskKind
    demands: Mapping[str, float]
    base_time: float = 0.0
    links: Tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        if any(v < 0 for v in self.demands.values()):
            raise StructureError(f"task {self.label}: negative demand")

    @property
    def label(self) -> str:
        return self.name or f"{self.kind.value}{self.id}"


@dataclass(frozen=True)
class JobSpec:
    tasks: Tuple[TaskSpec, ...]
    n_iterations: int = 1
    graph_store_pins: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for i, t in enumerate(self.tasks):
            if t.id != i:
                raise StructureError(f"task ids must be 0..|J|-1, got {t.id} at {i}")
        if self.n_iterations < 1:
            raise StructureError("n_iterations must be >= 1")
        kinds = [t.kind for t in self.tasks]
        if TaskKind.PS not in kinds:
            raise StructureError("job needs at least one parameter server")
        if TaskKind.WORKER not in kinds:
            raise StructureError("job needs at least one worker")
        for t in self.tasks:
            if t.kind is TaskKind.SAMPLER:
                if len(t.links) != 1 or self.tasks[t.links[0]].kind is not TaskKind.WORKER:
                    raise StructureError(f"sampler {t.label} must link exactly one worker")
            elif t.kind is TaskKind.WORKER:
                if not t.links:
                    raise StructureError(f"worker {t.label} has no sampler")
                for s in t.links:
                    st = self.tasks[s]
                    if st.kind is not TaskKind.SAMPLER or st.links != (t.id,):
                        raise StructureError(
                            f"worker {t.label} lists {st.label}, which does not feed it")
        gs = set(self.of_kind(TaskKind.GRAPH_STORE))
        if set(self.graph_store_pins) != gs:
            raise StructureError("every graph store (and only graph stores) must be pinned")
        if len(set(self.graph_store_pins.values())) != len(gs):
            raise StructureError("two graph stores pinned to the same machine")

    def of_kind(self, kind: TaskKind) -> List[int]:
        return [t.id for t in self.tasks if t.kind is kind]

    @property
    def placeable(self) -> List[int]:
        return [t.id for t in self.tasks if t.kind is not TaskKind.GRAPH_STORE]

    def with_iterations(self, n: int) -> "JobSpec":
        return JobSpec(self.tasks, n, dict(self.graph_store_pins))


@dataclass(frozen=True)
class Placement:
    """Dense task -> machine map (one machine per task by construction)."""

    assign: Tuple[int, ...]

    def __getitem__(self, j: int) -> int:
        return self.assign[j]

    def __len__(self) -> int:
        return len(self.assign)

    def moved(self, j: int, m: int) -> "Placement":
        a = list(self.assign)
        a[j] = m
        return Placement(tuple(a))

    def tasks_on(self, m: int) -> List[int]:
        return [j for j, mm in enumerate(self.assign) if mm == m]


@dataclass(frozen=True)
class DependencyGraph:
    n_tasks: int
    # sorted (src, dst, iteration offset) triples
    edges: Tuple[Tuple[int, int, int], ...]
    edge_class: Mapping[FlowKey, str]

    @property
    def succ(self) -> Dict[int, List[Tuple[int, int]]]:
        out: Dict[int, List[Tuple[int, int]]] = {j: [] for j in range(self.n_tasks)}
        for s, d, delta in self.edges:
            out[s].append((d, delta))
        return out

    @property
    def pred(self) -> Dict[int, List[Tuple[int, int]]]:
        out: Dict[int, List[Tuple[int, int]]] = {j: [] for j in range(self.n_tasks)}
        for s, d, delta in self.edges:
            out[d].append((s, delta))
        return out

    def offset(self, src: int, dst: int) -> int:
        return 1 if self.edge_class[(src, dst)] == "ps_to_worker" else 0


@dataclass(frozen=True)
class FeasibilityReport:
    # (machine, resource) -> (used, capacity, violation fraction)
    usage: Mapping[Tuple[int, str], Tuple[float, float, float]]
    overall_feasible: bool
    penalty_sum: float
    mu: float = 0.0

    def violations(self) -> List[Tuple[int, str, float]]:
        return [(m, r, v) for (m, r), (_, _, v) in sorted(self.usage.items()) if v > 0]


@dataclass(frozen=True)
class FlowStatics:
    """Inter-machine flows of one iteration and their per-machine degrees."""

    flows: Tuple[FlowKey, ...]
    deg_in: Tuple[int, ...]
    deg_out: Tuple[int, ...]

    @property
    def delta(self) -> int:
        return max(max(self.deg_in, default=0), max(self.deg_out, default=0))


def build_dependency_graph(job: JobSpec) -> DependencyGraph:
    stores = job.of_kind(TaskKind.GRAPH_STORE)
    samplers = job.of_kind(TaskKind.SAMPLER)
    workers = job.of_kind(TaskKind.WORKER)
    servers = job.of_kind(TaskKind.PS)
    edges = []
    for g in stores:
        edges += [(g, s, 0) for s in samplers]
    for s in samplers:
        links = job.tasks[s].links
        if len(links) != 1:
            raise StructureError(f"sampler {job.tasks[s].label} has no worker")
        edges.append((s, links[0], 0))
    for w in workers:
        edges += [(w, ps, 0) for ps in servers]
    for ps in servers:
        edges += [(ps, w, 1) for w in workers]
    edges.sort()
    classes = {(s, d): EDGE_CLASSES[(job.tasks[s].kind, job.tasks[d].kind)]
               for s, d, _ in edges}
    return DependencyGraph(len(job.tasks), tuple(edges), classes)


def _check_structure(p: Placement, cluster: ClusterSpec, job: JobSpec) -> None:
    if len(p) != len(job.tasks):
        raise StructureError(f"placement covers {len(p)} tasks, job has {len(job.tasks)}")
    M = cluster.n_machines
    bad = [j for j, m in enumerate(p.assign) if not 0 <= m < M]
    if bad:
        raise StructureError(f"tasks {bad} placed on machines outside 0..{M - 1}")
    n_gs = len(job.of_kind(TaskKind.GRAPH_STORE))
    if n_gs != M:
        raise StructureError(f"job has {n_gs} graph stores for {M} machines")
    for g, m in job.graph_store_pins.items():
        if m >= M:
            raise StructureError(f"graph store {job.tasks[g].label} pinned to missing machine {m}")
        if p[g] != m:
            raise StructureError(f"graph store {job.tasks[g].label} must sit on machine {m}")


def machine_usage(p: Placement, cluster: ClusterSpec, job: JobSpec) -> List[Dict[str, float]]:
    used: List[Dict[str, float]] = [dict.fromkeys(cluster.resources, 0.0)
                                    for _ in range(cluster.n_machines)]
    for t in job.tasks:
        row = used[p[t.id]]
        for r, w in t.demands.items():
            row[r] = row.get(r, 0.0) + w
    return used


def violation_fraction(used: float, cap: float) -> float:
    if used <= cap * (1 + _CAP_TOL) + _CAP_TOL:
        return 0.0
    if cap <= 0:
        return math.inf
    return (used - cap) / cap


def check_placement(p: Placement, cluster: ClusterSpec, job: JobSpec,
                    mu: float = 0.0) -> FeasibilityReport:
    """Capacity check against ``(1+mu)*C``; the penalty always uses the plain ``C``."""
    _check_structure(p, cluster, job)
    usage = {}
    penalty = 0.0
    feasible = True
    for m, row in enumerate(machine_usage(p, cluster, job)):
        for r, u in row.items():
            cap = cluster.capacity(m, r)
            v = violation_fraction(u, cap)
            usage[(m, r)] = (u, cap, v)
            penalty += v
            if u > (1 + mu) * cap * (1 + _CAP_TOL) + _CAP_TOL:
                feasible = False
    return FeasibilityReport(usage, feasible, penalty, mu)


def fits(extra: Mapping[str, float], used: Mapping[str, float], machine: Machine,
         mu: float = 0.0) -> bool:
    for r, w in extra.items():
        if w <= 0:
            continue
        cap = float(machine.capacities.get(r, 0.0))
        if used.get(r, 0.0) + w > (1 + mu) * cap * (1 + _CAP_TOL) + _CAP_TOL:
            return False
    return True


def one_iteration_flows(p: Placement, g: DependencyGraph,
                        n_machines: Optional[int] = None) -> FlowStatics:
    M = n_machines if n_machines is not None else max(p.assign) + 1
    deg_in = [0] * M
    deg_out = [0] * M
    flows = []
    for s, d, _ in g.edges:
        ms, md = p[s], p[d]
        if ms != md:
            flows.append((s, d))
            deg_out[ms] += 1
            deg_in[md] += 1
    return FlowStatics(tuple(flows), tuple(deg_in), tuple(deg_out))


def make_job(n_machines: int, samplers_per_worker: Sequence[int], n_ps: int = 1,
             demands: Optional[Mapping[TaskKind, Mapping[str, float]]] = None,
             base_times: Optional[Mapping[TaskKind, float]] = None,
             n_iterations: int = 1) -> JobSpec:
    """Build a job with one graph store per machine and the given worker fan-in."""
    demands = demands or {}
    base_times = base_times or {}
    tasks: List[TaskSpec] = []

    def add(kind, links=(), name=""):
        tasks.append(TaskSpec(len(tasks), kind, dict(demands.get(kind, {})),
                              float(base_times.get(kind, 0.0)), tuple(links), name))
        return len(tasks) - 1

    pins = {}
    for m in range(n_machines):
        pins[add(TaskKind.GRAPH_STORE, name=f"gs{m}")] = m
    # samplers come right before their worker so ids are known up front
    for w_idx, k in enumerate(samplers_per_worker):
        if k < 1:
            raise StructureError(f"worker {w_idx} needs at least one sampler")
        first = len(tasks)
        wid = first + k
        for s in range(k):
            add(TaskKind.SAMPLER, (wid,), f"s{w_idx}_{s}")
        add(TaskKind.WORKER, tuple(range(first, wid)), f"w{w_idx}")
    for i in range(n_ps):
        add(TaskKind.PS, name=f"ps{i}")
    return JobSpec(tuple(tasks), n_iterations, pins)


def iter_occurrences(job: JobSpec, n_iterations: int) -> Iterable[Tuple[int, int]]:
    for n in range(1, n_iterations + 1):
        for t in job.tasks:
            yield t.id, n
