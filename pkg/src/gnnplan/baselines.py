"""Comparison systems: colocation + FIFO, OMCoflow-style weighting, and MRTF.

All three keep the inter-iteration gating of the online scheduler (a pair's
next-iteration flow waits for the previous one) and differ only in rates.
Tasks start as soon as their inputs arrive under every policy.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

from .engine import Flow, SimState
from .model import (
    ClusterSpec,
    InfeasibleError,
    JobSpec,
    Placement,
    TaskKind,
    fits,
)
from .oes import OESPolicy

BASELINES = ("distdgl", "omcoflow", "mrtf")


def _attainable(f: Flow, st: SimState) -> float:
    return min(st.bw_out[f.src_m], st.bw_in[f.dst_m])


class _PerFlowPolicy(OESPolicy):
    def group_key(self, flow: Flow):
        return flow.key

    @staticmethod
    def _flows(st: SimState) -> List[Flow]:
        # one flow per group; groups holding only a drained flow are skipped
        return [g.heap[0][2] for g in st.active.values() if g.heap]


class FIFOPolicy(_PerFlowPolicy):
    """Each egress NIC sends its queue one flow at a time, in admission order."""

    name = "fifo"

    def assign_rates(self, st: SimState) -> None:
        flows = self._flows(st)
        heads: Dict[int, Tuple[tuple, Flow]] = {}
        for f in flows:
            f.group.rate = 0.0
            k = (f.admitted, f.n, f.src, f.dst)
            h = heads.get(f.src_m)
            if h is None or k < h[0]:
                heads[f.src_m] = (k, f)
        rem_in = list(st.bw_in)
        for _, f in sorted(heads.values(), key=lambda kf: kf[0]):
            r = min(st.bw_out[f.src_m], rem_in[f.dst_m])
            f.group.rate = max(r, 0.0)
            rem_in[f.dst_m] -= f.group.rate


class MRTFPolicy(_PerFlowPolicy):
    """Minimum remaining time first with greedy full-rate allocation."""

    name = "mrtf"

    def assign_rates(self, st: SimState) -> None:
        flows = self._flows(st)
        bw_in, bw_out = st.bw_in, st.bw_out
        rem_in = list(bw_in)
        rem_out = list(bw_out)

        def key(f: Flow):
            left = f.target - f.group.served
            return (left / min(bw_out[f.src_m], bw_in[f.dst_m]), f.n, f.src, f.dst)

        for f in sorted(flows, key=key):
            r = max(min(rem_out[f.src_m], rem_in[f.dst_m]), 0.0)
            f.group.rate = r
            rem_out[f.src_m] -= r
            rem_in[f.dst_m] -= r


class OMCoflowPolicy(_PerFlowPolicy):
    """Flows into one task form a coflow; shares follow inverse standalone finish time."""

    name = "omcoflow"

    def start(self, st: SimState) -> None:
        super().start(st)
        self._offsets = {(s, d): delta for s, d, delta in st.graph.edges}

    def assign_rates(self, st: SimState) -> None:
        bw_in, bw_out = st.bw_in, st.bw_out
        offsets = self._offsets
        members = []
        total: Dict[Tuple[int, int], float] = {}
        for f in self._flows(st):
            # inverse of the standalone finish time
            inv = min(bw_out[f.src_m], bw_in[f.dst_m]) / max(f.target - f.group.served, 1e-300)
            c = (f.dst, f.n + offsets[(f.src, f.dst)])
            members.append((f, c, inv))
            total[c] = total.get(c, 0.0) + inv
        M = len(bw_in)
        w_in = [0.0] * M
        w_out = [0.0] * M
        weights = []
        for f, c, inv in members:
            w = inv / total[c]
            weights.append(w)
            w_in[f.dst_m] += w
            w_out[f.src_m] += w
        for (f, _, _), w in zip(members, weights):
            f.group.rate = min(bw_in[f.dst_m] * w / w_in[f.dst_m],
                               bw_out[f.src_m] * w / w_out[f.src_m])


def fifo_policy() -> FIFOPolicy:
    return FIFOPolicy()


def mrtf_policy() -> MRTFPolicy:
    return MRTFPolicy()


def omcoflow_policy() -> OMCoflowPolicy:
    return OMCoflowPolicy()


def _headroom(used: Dict[str, float], machine) -> float:
    return sum((c - used.get(r, 0.0)) / c for r, c in machine.capacities.items() if c > 0)


def _pick(demand: Dict[str, float], used: List[Dict[str, float]], cluster: ClusterSpec,
          prefer: int = -1) -> int:
    if prefer >= 0 and fits(demand, used[prefer], cluster.machines[prefer]):
        return prefer
    best, best_score = -1, None
    for m in cluster.machines:
        if fits(demand, used[m.id], m):
            score = _headroom(used[m.id], m)
            if best_score is None or score > best_score:
                best, best_score = m.id, score
    return best


def _add(used: Dict[str, float], demand) -> None:
    for r, w in demand.items():
        used[r] = used.get(r, 0.0) + w


def colocated_placement(job: JobSpec, cluster: ClusterSpec) -> Placement:
    """Keep each worker with its samplers where possible, splitting bundles that fit nowhere."""
    assign = [-1] * len(job.tasks)
    for g, m in job.graph_store_pins.items():
        assign[g] = m
    used: List[Dict[str, float]] = [dict.fromkeys(cluster.resources, 0.0)
                                    for _ in cluster.machines]
    for g, m in job.graph_store_pins.items():
        _add(used[m], job.tasks[g].demands)
    workers = sorted(job.of_kind(TaskKind.WORKER), key=lambda w: (-len(job.tasks[w].links), w))
    for w in workers:
        members = [w, *job.tasks[w].links]
        bundle: Dict[str, float] = {}
        for j in members:
            _add(bundle, job.tasks[j].demands)
        m = _pick(bundle, used, cluster)
        if m >= 0:
            for j in members:
                assign[j] = m
            _add(used[m], bundle)
            continue
        m = _pick(dict(job.tasks[w].demands), used, cluster)
        if m < 0:
            raise InfeasibleError(f"no machine can host worker {job.tasks[w].label}")
        assign[w] = m
        _add(used[m], job.tasks[w].demands)
        for s in job.tasks[w].links:
            ms = _pick(dict(job.tasks[s].demands), used, cluster, prefer=m)
            if ms < 0:
                raise InfeasibleError(f"no machine can host sampler {job.tasks[s].label}")
            assign[s] = ms
            _add(used[ms], job.tasks[s].demands)
    for ps in job.of_kind(TaskKind.PS):
        m = _pick(dict(job.tasks[ps].demands), used, cluster)
        if m < 0:
            raise InfeasibleError(f"no machine can host parameter server {job.tasks[ps].label}")
        assign[ps] = m
        _add(used[m], job.tasks[ps].demands)
    return Placement(tuple(assign))


def bundles_split(job: JobSpec, p: Placement) -> int:
    return sum(1 for w in job.of_kind(TaskKind.WORKER)
               if any(p[s] != p[w] for s in job.tasks[w].links))
