"""Scenario files, the canned cluster configs, and random instance families.

Scenario document (JSON, ``schema_version`` 1)::

    {"schema_version": 1, "n_iterations": 20,
     "machines": [{"id": 0, "capacities": {"mem_gb": 48, "cpu_cores": 8, "gpus": 2},
                   "bw_in_gbps": 50, "bw_out_gbps": 50}, ...],
     "tasks": [{"id": "gs0", "kind": "graph_store", "demands": {"mem_gb": 4},
                "base_time_ms": 20, "links": [], "pin": 0}, ...]}

Task ``id`` is a name; ``links`` refer to names.  Task order in the file is the
task index order.  Placement documents map task names to machine ids.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .model import (
    ClusterSpec,
    JobSpec,
    Machine,
    Placement,
    StructureError,
    TaskKind,
    TaskSpec,
    build_dependency_graph,
    make_job,
)
from .profiles import (
    DEFAULT_DURATIONS_MS,
    IterationDraw,
    Profile,
    derive_seed,
    draw_iterations,
    synth_profile,
)

SCHEMA_VERSION = 1
GBPS = 1e9


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    cluster: ClusterSpec
    job: JobSpec


# -- documents ----------------------------------------------------------------


def _read(doc: Union[Mapping[str, Any], str, Path], what: str) -> Mapping[str, Any]:
    if isinstance(doc, Mapping):
        return doc
    try:
        out = json.loads(Path(doc).read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read {what} {doc}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{what} {doc} is not valid JSON: {exc}") from exc
    if not isinstance(out, Mapping):
        raise ScenarioError(f"{what} document must be an object")
    return out


def _num(v: Any, path: str, positive: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{path}: not a number")
    if v < 0 or (positive and v == 0):
        raise ScenarioError(f"{path}: must be {'> 0' if positive else '>= 0'}")
    return float(v)


def load_scenario(doc: Union[Mapping[str, Any], str, Path]) -> Scenario:
    d = _read(doc, "scenario")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version: expected {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
    machines = []
    for i, m in enumerate(d.get("machines") or []):
        p = f"machines[{i}]"
        if m.get("id") != i:
            raise ScenarioError(f"{p}.id: machine ids must be 0..M-1 in order")
        caps = m.get("capacities")
        if not isinstance(caps, Mapping):
            raise ScenarioError(f"{p}.capacities: missing")
        machines.append(Machine(i, {r: _num(v, f"{p}.capacities.{r}") for r, v in caps.items()},
                                _num(m.get("bw_in_gbps"), f"{p}.bw_in_gbps", True) * GBPS,
                                _num(m.get("bw_out_gbps"), f"{p}.bw_out_gbps", True) * GBPS))
    if not machines:
        raise ScenarioError("machines: empty")
    raw = d.get("tasks") or []
    if not raw:
        raise ScenarioError("tasks: empty")
    index: Dict[str, int] = {}
    for i, t in enumerate(raw):
        name = t.get("id")
        if not isinstance(name, str) or not name:
            raise ScenarioError(f"tasks[{i}].id: must be a non-empty string")
        if name in index:
            raise ScenarioError(f"tasks[{i}].id: duplicate {name!r}")
        index[name] = i
    tasks, pins = [], {}
    for i, t in enumerate(raw):
        p = f"tasks[{i}]"
        try:
            kind = TaskKind(t.get("kind"))
        except ValueError:
            raise ScenarioError(f"{p}.kind: unknown kind {t.get('kind')!r}") from None
        links = []
        for k, name in enumerate(t.get("links", [])):
            if name not in index:
                raise ScenarioError(f"{p}.links[{k}]: unknown task {name!r}")
            links.append(index[name])
        demands = {r: _num(v, f"{p}.demands.{r}") for r, v in (t.get("demands") or {}).items()}
        tasks.append(TaskSpec(i, kind, demands, _num(t.get("base_time_ms", 0), f"{p}.base_time_ms") * 1e-3,
                              tuple(links), t["id"]))
        if kind is TaskKind.GRAPH_STORE:
            if "pin" not in t:
                raise ScenarioError(f"{p}.pin: graph stores need a pinned machine")
            pins[i] = int(t["pin"])
    n_iter = d.get("n_iterations", 1)
    if isinstance(n_iter, bool) or not isinstance(n_iter, int) or n_iter < 1:
        raise ScenarioError("n_iterations: must be an integer >= 1")
    try:
        cluster = ClusterSpec(tuple(machines))
        job = JobSpec(tuple(tasks), n_iter, pins)
        build_dependency_graph(job)
    except StructureError as exc:
        raise ScenarioError(str(exc)) from exc
    if len(pins) != cluster.n_machines:
        raise ScenarioError(f"{len(pins)} graph stores for {cluster.n_machines} machines")
    if any(m >= cluster.n_machines for m in pins.values()):
        raise ScenarioError("graph store pinned to a machine that does not exist")
    return Scenario(cluster, job)


def dump_scenario(sc: Scenario) -> Dict[str, Any]:
    job = sc.job
    return {
        "schema_version": SCHEMA_VERSION,
        "n_iterations": job.n_iterations,
        "machines": [{"id": m.id, "capacities": dict(m.capacities),
                      "bw_in_gbps": m.bw_in / GBPS, "bw_out_gbps": m.bw_out / GBPS}
                     for m in sc.cluster.machines],
        "tasks": [{"id": t.label, "kind": t.kind.value, "demands": dict(t.demands),
                   "base_time_ms": t.base_time * 1e3,
                   "links": [job.tasks[k].label for k in t.links],
                   **({"pin": job.graph_store_pins[t.id]} if t.id in job.graph_store_pins else {})}
                  for t in job.tasks],
    }


def load_placement(doc: Union[Mapping[str, Any], str, Path], job: JobSpec) -> Placement:
    d = _read(doc, "placement")
    assign = d.get("assign")
    if not isinstance(assign, Mapping):
        raise ScenarioError("assign: missing task -> machine map")
    out = []
    for t in job.tasks:
        if t.label not in assign:
            raise ScenarioError(f"assign.{t.label}: missing")
        m = assign[t.label]
        if isinstance(m, bool) or not isinstance(m, int):
            raise ScenarioError(f"assign.{t.label}: machine id must be an integer")
        out.append(m)
    return Placement(tuple(out))


def dump_placement(p: Placement, job: JobSpec) -> Dict[str, Any]:
    return {"schema_version": SCHEMA_VERSION,
            "assign": {t.label: p[t.id] for t in job.tasks}}


def write_json(obj: Any, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# -- canned configurations ----------------------------------------------------

TESTBED_DEMANDS = {
    TaskKind.GRAPH_STORE: {"mem_gb": 4.0},
    TaskKind.WORKER: {"mem_gb": 3.0, "cpu_cores": 1.0, "gpus": 1.0},
    TaskKind.SAMPLER: {"mem_gb": 7.0, "cpu_cores": 2.0},
    TaskKind.PS: {"mem_gb": 5.0, "cpu_cores": 1.0},
}

# simulated-cluster demands: samplers take one core so the drawn clusters can
# host all 32 of them
SIM_DEMANDS = {**TESTBED_DEMANDS, TaskKind.SAMPLER: {"mem_gb": 7.0, "cpu_cores": 1.0}}

BASE_TIMES = {TaskKind(k): v * 1e-3 for k, v in DEFAULT_DURATIONS_MS.items()}


def testbed_scenario(n_iterations: int = 20) -> Scenario:
    """Four 48 GB / 8 core / 2 GPU machines, two on 50 Gbps and two on 10 Gbps links."""
    caps = {"mem_gb": 48.0, "cpu_cores": 8.0, "gpus": 2.0}
    bws = (50, 50, 10, 10)
    cluster = ClusterSpec(tuple(Machine(i, dict(caps), b * GBPS, b * GBPS) for i, b in enumerate(bws)))
    job = make_job(4, [2] * 6, 1, TESTBED_DEMANDS, BASE_TIMES, n_iterations)
    return Scenario(cluster, job)


def sim8_scenario(seed: int = 8, n_iterations: int = 20) -> Scenario:
    """Eight heterogeneous machines; 8 graph stores, 16 workers with 2 samplers each, 1 PS."""
    from .baselines import colocated_placement
    from .model import InfeasibleError
    from .placement import ifs

    job = make_job(8, [2] * 16, 1, SIM_DEMANDS, BASE_TIMES, n_iterations)
    for attempt in range(1000):
        rng = random.Random(derive_seed(seed, "sim8", attempt))
        machines = []
        for i in range(8):
            bw = rng.choice((10, 20, 50)) * GBPS
            machines.append(Machine(i, {"mem_gb": float(rng.randint(32, 128)),
                                        "cpu_cores": float(rng.randint(4, 16)),
                                        "gpus": float(rng.randint(1, 4))}, bw, bw))
        cluster = ClusterSpec(tuple(machines))
        try:
            ifs(job, cluster)
            colocated_placement(job, cluster)
        except InfeasibleError:
            continue
        return Scenario(cluster, job)
    raise RuntimeError("could not draw a feasible cluster")


def sim8_profile(seed: int = 0, pmr: float = 1.16, mean_volume: float = 8e6) -> Profile:
    return synth_profile(mean_volume, pmr, 50, seed)


# -- random instance families -------------------------------------------------


@dataclass(frozen=True)
class Instance:
    job: JobSpec
    cluster: ClusterSpec
    placement: Placement
    draws: Tuple[IterationDraw, ...]
    tick: Optional[float] = None


_BIG = {"mem_gb": 1e6, "cpu_cores": 1e6, "gpus": 1e6}


def _random_placement(job: JobSpec, n_machines: int, rng: random.Random, colocate: float) -> Placement:
    assign = [-1] * len(job.tasks)
    for g, m in job.graph_store_pins.items():
        assign[g] = m
    for w in job.of_kind(TaskKind.WORKER):
        assign[w] = rng.randrange(n_machines)
        for s in job.tasks[w].links:
            assign[s] = assign[w] if rng.random() < colocate else rng.randrange(n_machines)
    for ps in job.of_kind(TaskKind.PS):
        assign[ps] = rng.randrange(n_machines)
    return Placement(tuple(assign))


def random_instance(seed: int, machines: Tuple[int, int] = (2, 16), workers: Tuple[int, int] = (1, 20),
                    samplers: Tuple[int, int] = (1, 4), iterations: Tuple[int, int] = (1, 10),
                    max_flows: int = 1000) -> Instance:
    """Random cluster, job, placement and volumes with some zero-volume flows.

    ``max_flows`` caps the flow occurrences of a run (edges times iterations) so
    that sweeps over many instances stay fast; only the iteration count shrinks,
    never below one.
    """
    rng = random.Random(derive_seed(seed, "random_instance"))
    M = rng.randint(*machines)
    W = rng.randint(*workers)
    spw = [rng.randint(*samplers) for _ in range(W)]
    n_ps = rng.choice((1, 1, 1, 2))
    N = rng.randint(*iterations)
    S = sum(spw)
    edges = M * S + S + 2 * W * n_ps
    N = max(1, min(N, max_flows // edges))
    bws = (1, 10, 20, 50)
    cluster = ClusterSpec(tuple(Machine(i, dict(_BIG), rng.choice(bws) * GBPS, rng.choice(bws) * GBPS)
                                for i in range(M)))
    job = make_job(M, spw, n_ps, n_iterations=N)
    placement = _random_placement(job, M, rng, colocate=rng.random())
    mean = rng.uniform(0.2e6, 20e6)
    prof = synth_profile(mean, rng.uniform(1.0, 3.0), 20, derive_seed(seed, "profile"),
                         model_bytes=rng.uniform(0.1e6, 5e6),
                         durations_ms={k: rng.uniform(1, 100) for k in DEFAULT_DURATIONS_MS})
    vols = dict(prof.volumes)
    if rng.random() < 0.3:
        gs = list(vols["gs_to_sampler"])
        for i in range(0, len(gs), 4):
            gs[i] = 0.0
        vols["gs_to_sampler"] = tuple(gs)
    prof = Profile(prof.durations, vols, prof.seed)
    draws = tuple(draw_iterations(prof, job, build_dependency_graph(job), N))
    return Instance(job, cluster, placement, draws)


def tiny_instance(seed: int, tick: float = 0.01) -> Instance:
    """Oracle-sized instance: at most 3 machines, 8 tasks, 2 iterations, durations on
    the tick grid and every volume a whole number of ticks at 1 Gbps."""
    rng = random.Random(derive_seed(seed, "tiny_instance"))
    M = rng.choice((2, 2, 3))
    budget = 8 - M - 1  # tasks left for samplers and workers
    shapes = [s for s in ([1], [2], [3], [4], [1, 1], [2, 1], [1, 2], [2, 2]) if len(s) + sum(s) <= budget]
    spw = rng.choice(shapes)
    job = make_job(M, spw, 1, n_iterations=rng.choice((1, 2)))
    cluster = ClusterSpec(tuple(Machine(i, dict(_BIG), rng.choice((1, 2, 4)) * GBPS,
                                        rng.choice((1, 2, 4)) * GBPS) for i in range(M)))
    placement = _random_placement(job, M, rng, colocate=0.3)
    graph = build_dependency_graph(job)
    unit = GBPS * tick / 8  # bytes sent in one tick at 1 Gbps
    draws = []
    for n in range(1, job.n_iterations + 1):
        durs = tuple(rng.randint(1, 3) * tick for _ in job.tasks)
        vols = {(s, d): rng.randint(1, 4) * unit for s, d, _ in graph.edges}
        draws.append(IterationDraw(n, durs, vols))
    return Instance(job, cluster, placement, tuple(draws), tick)


def enumerable_instance(seed: int) -> Tuple[JobSpec, ClusterSpec]:
    """Small packing instance (at most 3 machines and 6 placeable tasks), homogeneous
    demands per kind, capacities chosen so that both outcomes occur."""
    rng = random.Random(derive_seed(seed, "enumerable"))
    M = rng.randint(1, 3)
    while True:
        W = rng.randint(1, 2)
        spw = [rng.randint(1, 2) for _ in range(W)]
        n_ps = rng.randint(1, 2)
        if W + sum(spw) + n_ps <= 6:
            break
    demands = {
        TaskKind.GRAPH_STORE: {"mem_gb": float(rng.randint(0, 2)), "cpu_cores": 0.0},
        TaskKind.SAMPLER: {"mem_gb": float(rng.randint(1, 4)), "cpu_cores": float(rng.randint(0, 2))},
        TaskKind.WORKER: {"mem_gb": float(rng.randint(1, 4)), "cpu_cores": 1.0,
                          "gpus": float(rng.randint(0, 1))},
        TaskKind.PS: {"mem_gb": float(rng.randint(1, 3)), "cpu_cores": float(rng.randint(0, 1))},
    }
    job = make_job(M, spw, n_ps, demands)
    machines = tuple(Machine(i, {"mem_gb": float(rng.randint(2, 14)),
                                 "cpu_cores": float(rng.randint(1, 5)),
                                 "gpus": float(rng.randint(0, 2))}, GBPS, GBPS) for i in range(M))
    return job, ClusterSpec(machines)


def small_search_instance(seed: int) -> Tuple[JobSpec, ClusterSpec, Profile]:
    """Two or three machines and at most 6 placeable tasks, small enough to enumerate
    every placement yet with real contention between placements.  Redraws until a
    feasible placement exists."""
    from .model import InfeasibleError
    from .placement import ifs

    demands = {
        TaskKind.GRAPH_STORE: {"mem_gb": 2.0},
        TaskKind.SAMPLER: {"mem_gb": 4.0, "cpu_cores": 1.0},
        TaskKind.WORKER: {"mem_gb": 4.0, "cpu_cores": 1.0, "gpus": 1.0},
        TaskKind.PS: {"mem_gb": 2.0, "cpu_cores": 1.0},
    }
    for attempt in range(1000):
        rng = random.Random(derive_seed(seed, "search_instance", attempt))
        M = rng.choice((2, 3))
        spw = rng.choice(([2], [3], [4], [1, 1], [2, 1], [1, 2]))
        job = make_job(M, spw, 1, demands)
        machines = tuple(Machine(i, {"mem_gb": float(rng.randint(8, 16)),
                                     "cpu_cores": float(rng.randint(2, 4)),
                                     "gpus": float(rng.randint(1, 2))},
                                 rng.choice((1, 5, 10)) * GBPS, rng.choice((1, 5, 10)) * GBPS)
                         for i in range(M))
        cluster = ClusterSpec(machines)
        try:
            ifs(job, cluster)
        except InfeasibleError:
            continue
        prof = synth_profile(rng.uniform(2e6, 10e6), 1.3, 20, derive_seed(seed, "profile"))
        return job, cluster, prof
    raise RuntimeError("could not draw a feasible search instance")
