"""Placement search and online scheduling for distributed GNN training."""

from .baselines import colocated_placement, fifo_policy, mrtf_policy, omcoflow_policy
from .bounds import brute_force_optimal, chain_lower_bound, extract_chain, path_bound, verify_instance
from .engine import ScheduleRecord, simulate, validate
from .model import (
    ClusterSpec,
    JobSpec,
    Machine,
    Placement,
    TaskKind,
    TaskSpec,
    build_dependency_graph,
    check_placement,
    make_job,
    one_iteration_flows,
)
from .oes import OESPolicy
from .placement import dgtp, estimate_makespan, etp, ifs, placement_cost
from .profiles import Profile, draw_iteration, load_profile, measured_pmr, synth_profile

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "JobSpec", "Machine", "Placement", "TaskKind", "TaskSpec", "OESPolicy",
    "Profile", "ScheduleRecord", "brute_force_optimal", "build_dependency_graph",
    "chain_lower_bound", "check_placement", "colocated_placement", "dgtp", "draw_iteration",
    "estimate_makespan", "etp", "extract_chain", "fifo_policy", "ifs", "load_profile",
    "make_job", "measured_pmr", "mrtf_policy", "omcoflow_policy", "one_iteration_flows",
    "path_bound", "placement_cost", "simulate", "synth_profile", "validate", "verify_instance",
]
