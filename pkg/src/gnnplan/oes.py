"""Online execution and flow scheduling with degree-balanced rates.

A released flow waits in the pending set while the same (src, dst) pair's flow
from the previous iteration is still in flight; otherwise it transmits at once.
Every active flow from machine ``m`` to ``m'`` gets
``min(B_in[m'] / deg_in[m'], B_out[m] / deg_out[m])``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

from .engine import Flow, FlowOcc, SchedulerPolicy, SimState


@dataclass(frozen=True)
class DegreeSnapshot:
    deg_in: Tuple[int, ...]
    deg_out: Tuple[int, ...]


def degree_snapshot(state: SimState) -> DegreeSnapshot:
    M = len(state.bw_in)
    din = [0] * M
    dout = [0] * M
    for g in state.active.values():
        din[g.dst_m] += g.size
        dout[g.src_m] += g.size
    return DegreeSnapshot(tuple(din), tuple(dout))


class OESPolicy(SchedulerPolicy):
    name = "oes"

    def __init__(self, work_conserving: bool = False):
        self.work_conserving = work_conserving
        self.pending: Dict[FlowOcc, Flow] = {}
        self.max_deg_in: List[int] = []
        self.max_deg_out: List[int] = []
        self.rate_updates = 0

    def start(self, state: SimState) -> None:
        M = len(state.bw_in)
        self.pending = {}
        self.max_deg_in = [0] * M
        self.max_deg_out = [0] * M
        self.rate_updates = 0

    # all flows between one machine pair share a rate under this rule
    def group_key(self, flow: Flow):
        return (flow.src_m, flow.dst_m)

    def classify_new_flows(self, flows: Iterable[Flow], state: SimState) -> List[Flow]:
        """Split freshly released flows; returns those that may transmit now."""
        admitted = []
        for f in flows:
            if (f.src, f.dst, f.n - 1) in state.in_flight:
                self.pending[f.key] = f
            else:
                admitted.append(f)
        return admitted

    def promote_pending(self, finished: Flow, state: SimState) -> List[Flow]:
        nxt = self.pending.pop((finished.src, finished.dst, finished.n + 1), None)
        return [nxt] if nxt is not None else []

    def on_release(self, flow: Flow, state: SimState) -> bool:
        return bool(self.classify_new_flows([flow], state))

    def on_flow_done(self, flow: Flow, state: SimState) -> List[Flow]:
        return self.promote_pending(flow, state)

    def assign_rates(self, state: SimState) -> None:
        snap = degree_snapshot(state)
        din, dout = snap.deg_in, snap.deg_out
        for m, (a, b) in enumerate(zip(din, dout)):
            if a > self.max_deg_in[m]:
                self.max_deg_in[m] = a
            if b > self.max_deg_out[m]:
                self.max_deg_out[m] = b
        self.rate_updates += 1
        for g in state.active.values():
            if g.src_m == g.dst_m:
                raise RuntimeError(f"colocated flow group {g.key} reached rate assignment")
            g.rate = min(state.bw_in[g.dst_m] / din[g.dst_m],
                         state.bw_out[g.src_m] / dout[g.src_m])
        if self.work_conserving:
            fill_slack(state)


def fill_slack(state: SimState) -> None:
    """Progressive filling of leftover NIC capacity on top of the assigned rates."""
    M = len(state.bw_in)
    slack_in = list(state.bw_in)
    slack_out = list(state.bw_out)
    groups = [g for g in state.active.values() if g.sending]
    for g in groups:
        slack_in[g.dst_m] -= g.rate * g.sending
        slack_out[g.src_m] -= g.rate * g.sending
    growing = {id(g): g for g in groups}
    while growing:
        cnt_in = [0] * M
        cnt_out = [0] * M
        for g in growing.values():
            cnt_in[g.dst_m] += g.sending
            cnt_out[g.src_m] += g.sending
        step = min(min(slack_in[m] / cnt_in[m] for m in range(M) if cnt_in[m]),
                   min(slack_out[m] / cnt_out[m] for m in range(M) if cnt_out[m]))
        step = max(step, 0.0)
        for g in growing.values():
            g.rate += step
            slack_in[g.dst_m] -= step * g.sending
            slack_out[g.src_m] -= step * g.sending
        eps_in = [1e-12 * b for b in state.bw_in]
        eps_out = [1e-12 * b for b in state.bw_out]
        growing = {k: g for k, g in growing.items()
                   if slack_in[g.dst_m] > eps_in[g.dst_m] and slack_out[g.src_m] > eps_out[g.src_m]}
