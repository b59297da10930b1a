import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GBPS, cluster_of, const_draws, rates_of, state_with
from gnnplan import scenarios
from gnnplan.baselines import (
    BASELINES,
    FIFOPolicy,
    MRTFPolicy,
    OMCoflowPolicy,
    bundles_split,
    colocated_placement,
    fifo_policy,
    mrtf_policy,
    omcoflow_policy,
)
from gnnplan.engine import simulate, validate
from gnnplan.model import (
    ClusterSpec,
    InfeasibleError,
    Machine,
    Placement,
    TaskKind,
    check_placement,
    make_job,
)
from gnnplan.oes import OESPolicy
from gnnplan.placement import ifs
from gnnplan.scenarios import random_instance

CLASSES = ("gs_to_sampler", "sampler_to_worker", "worker_to_ps", "ps_to_worker")
DEMANDS = {TaskKind.SAMPLER: {"cpu_cores": 2.0}, TaskKind.WORKER: {"cpu_cores": 1.0},
           TaskKind.PS: {"cpu_cores": 1.0}}


def test_bundles_stay_whole_when_they_fit():
    job = make_job(3, [2, 2, 2], 1, DEMANDS)
    cl = cluster_of([(1, 1)] * 3, {"cpu_cores": 6.0})
    p = colocated_placement(job, cl)
    assert bundles_split(job, p) == 0
    assert check_placement(p, cl, job).overall_feasible
    assert len({p[w] for w in job.of_kind(TaskKind.WORKER)}) == 3


def test_testbed_shape_splits_some_bundles():
    sc = scenarios.testbed_scenario()
    p = colocated_placement(sc.job, sc.cluster)
    assert check_placement(p, sc.cluster, sc.job).overall_feasible
    assert bundles_split(sc.job, p) >= 1


def test_one_big_machine_matches_ifs():
    job = make_job(2, [2, 1], 1, DEMANDS)
    cl = ClusterSpec((Machine(0, {"cpu_cores": 20.0}, 1e9, 1e9),
                      Machine(1, {"cpu_cores": 0.0}, 1e9, 1e9)))
    p = colocated_placement(job, cl)
    q = ifs(job, cl)
    assert {p[j] for j in job.placeable} == {q[j] for j in job.placeable} == {0}


def test_colocation_fails_when_nothing_fits():
    job = make_job(1, [1], 1, {TaskKind.WORKER: {"gpus": 1.0}})
    with pytest.raises(InfeasibleError):
        colocated_placement(job, cluster_of([(1, 1)], {"gpus": 0.0}))


def _one_flow():
    job = make_job(2, [1], 1)
    cl = cluster_of([(10, 10), (10, 10)])
    p = Placement((0, 1, 0, 0, 0))
    draws = const_draws(job, 2, {k: 0.05 for k in TaskKind},
                        {"gs_to_sampler": 1e8, "sampler_to_worker": 1.0,
                         "worker_to_ps": 1.0, "ps_to_worker": 1.0})
    return job, cl, p, draws


def test_single_flow_network_same_for_all_policies():
    job, cl, p, draws = _one_flow()
    spans = {simulate(job, cl, p, pol, draws=draws).makespan
             for pol in (OESPolicy(), fifo_policy(), mrtf_policy(), omcoflow_policy())}
    assert len(spans) == 1


# two samplers on m0 fed by gs1 on m1: two flows leaving one NIC
JOB2 = make_job(2, [2], 1)
GS0, GS1, S0, S1, W, PS = range(6)
P2 = Placement((0, 1, 0, 0, 0, 0))


def test_fifo_sends_one_flow_at_a_time():
    cl = cluster_of([(10, 10), (10, 10)])
    draws = const_draws(JOB2, 1, {k: 0.05 for k in TaskKind},
                        {"gs_to_sampler": 1e8, "sampler_to_worker": 1.0,
                         "worker_to_ps": 1.0, "ps_to_worker": 1.0})
    rec = simulate(JOB2, cl, P2, fifo_policy(), draws=draws)
    a, b = rec.flow_segments[(GS1, S0, 1)], rec.flow_segments[(GS1, S1, 1)]
    assert a[-1][1] <= b[0][0]
    assert a == [(pytest.approx(0.05), pytest.approx(0.13), 10 * GBPS)]
    assert validate(rec, JOB2, cl, P2, draws) == []


def test_fifo_orders_by_admission_then_iteration():
    pol = FIFOPolicy()
    st_ = state_with(JOB2, cluster_of([(10, 10), (10, 10)]), P2, pol,
                     [(GS1, S1, 2, 1e9), (GS1, S0, 1, 1e9)])
    pol.assign_rates(st_)
    assert rates_of(st_) == {(GS1, S0, 1): 10 * GBPS, (GS1, S1, 2): 0.0}


def test_omcoflow_single_flow_full_rate():
    pol = OMCoflowPolicy()
    st_ = state_with(JOB2, cluster_of([(10, 10), (4, 6)]), P2, pol, [(GS1, S0, 1, 1e9)])
    pol.assign_rates(st_)
    assert rates_of(st_) == {(GS1, S0, 1): pytest.approx(6 * GBPS)}


# one worker on m0 fed by samplers on m1 and m2
JOB3 = make_job(3, [2], 1)
P3 = Placement((0, 1, 2, 1, 2, 0, 0))
S_A, S_B, W3 = 3, 4, 5


def test_omcoflow_equal_flows_split_equally():
    pol = OMCoflowPolicy()
    st_ = state_with(JOB3, cluster_of([(10, 50), (50, 50), (50, 50)]), P3, pol,
                     [(S_A, W3, 1, 1e9), (S_B, W3, 1, 1e9)])
    pol.assign_rates(st_)
    assert list(rates_of(st_).values()) == [pytest.approx(5 * GBPS)] * 2


def test_omcoflow_weights_follow_inverse_finish_time():
    # standalone times 1:3, so shares 3:1 of the shared ingress
    pol = OMCoflowPolicy()
    st_ = state_with(JOB3, cluster_of([(8, 50), (50, 50), (50, 50)]), P3, pol,
                     [(S_A, W3, 1, 1e9), (S_B, W3, 1, 3e9)])
    pol.assign_rates(st_)
    r = rates_of(st_)
    assert r[(S_A, W3, 1)] == pytest.approx(6 * GBPS)
    assert r[(S_B, W3, 1)] == pytest.approx(2 * GBPS)


def test_mrtf_single_flow_full_rate():
    pol = MRTFPolicy()
    st_ = state_with(JOB2, cluster_of([(3, 10), (10, 10)]), P2, pol, [(GS1, S0, 1, 1e9)])
    pol.assign_rates(st_)
    assert rates_of(st_) == {(GS1, S0, 1): 3 * GBPS}


def test_mrtf_short_flow_monopolizes():
    pol = MRTFPolicy()
    st_ = state_with(JOB2, cluster_of([(10, 10), (10, 10)]), P2, pol,
                     [(GS1, S1, 1, 80e9), (GS1, S0, 1, 8e9)])
    pol.assign_rates(st_)
    assert rates_of(st_) == {(GS1, S0, 1): 10 * GBPS, (GS1, S1, 1): 0.0}


def test_mrtf_run_is_strict_priority():
    cl = cluster_of([(10, 10), (10, 10)])
    job = JOB2
    draws = const_draws(job, 1, {k: 0.05 for k in TaskKind}, dict.fromkeys(CLASSES, 1.0))
    d = draws[0]
    vols = dict(d.volumes)
    vols[(GS1, S0)] = 1e9
    vols[(GS1, S1)] = 10e9
    draws = [type(d)(1, d.durations, vols)]
    rec = simulate(job, cl, P2, mrtf_policy(), draws=draws)
    small, big = rec.flow_segments[(GS1, S0, 1)], rec.flow_segments[(GS1, S1, 1)]
    assert big[0][0] >= small[-1][1]
    assert validate(rec, job, cl, P2, draws) == []


POLICIES = {"fifo": fifo_policy, "mrtf": mrtf_policy, "omcoflow": omcoflow_policy}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(sorted(POLICIES)))
def test_baseline_records_validate(seed, name):
    inst = random_instance(seed, machines=(2, 8), workers=(1, 8), iterations=(1, 5),
                           max_flows=400)
    rec = simulate(inst.job, inst.cluster, inst.placement, POLICIES[name](), draws=inst.draws)
    assert validate(rec, inst.job, inst.cluster, inst.placement, inst.draws) == []


def test_baseline_names():
    assert BASELINES == ("distdgl", "omcoflow", "mrtf")
