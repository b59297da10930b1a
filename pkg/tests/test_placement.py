import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cluster_of
from gnnplan import scenarios
from gnnplan.engine import simulate
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
from gnnplan.placement import (
    acceptance_probability,
    available_machines,
    dgtp,
    enumerate_placements,
    estimate_makespan,
    etp_search,
    ifs,
    ifs_search,
    placement_cost,
)
from gnnplan.profiles import constant_profile, scale_batch
from gnnplan.scenarios import enumerable_instance, small_search_instance

GPU_JOB = {TaskKind.WORKER: {"gpus": 1.0}}
CONST = constant_profile({"graph_store": 0.01, "sampler": 0.02, "worker": 0.03, "ps": 0.04},
                         {"gs_to_sampler": 2e6, "sampler_to_worker": 4e6,
                          "worker_to_ps": 1e6, "ps_to_worker": 1e6})


def _gpus(*counts):
    return ClusterSpec(tuple(Machine(i, {"gpus": float(c)}, 1e9, 1e9) for i, c in enumerate(counts)))


def test_ifs_one_roomy_machine_finishes_in_first_stage():
    job = make_job(2, [1, 1, 1], 1, GPU_JOB)
    res = ifs_search(job, _gpus(3, 0))
    assert res.omega_sizes == (res.omega_sizes[0],)
    assert all(res.placement[j] == 0 for j in job.placeable)


def test_ifs_infeasible_when_demand_exceeds_capacity():
    job = make_job(2, [1, 1, 1], 1, GPU_JOB)
    with pytest.raises(InfeasibleError):
        ifs(job, _gpus(1, 1))


def test_ifs_splits_three_workers_two_and_one():
    job = make_job(2, [1, 1, 1], 1, GPU_JOB)
    cl = _gpus(2, 2)
    p = ifs(job, cl)
    per_machine = sorted(sum(p[w] == m for w in job.of_kind(TaskKind.WORKER)) for m in range(2))
    assert per_machine == [1, 2]
    assert check_placement(p, cl, job).overall_feasible
    assert any(check_placement(q, cl, job).overall_feasible for q in enumerate_placements(job, cl))


def test_ifs_order_seed_permutes_machines():
    job = make_job(3, [1], 1, GPU_JOB)
    orders = {ifs_search(job, _gpus(1, 1, 1), s).order for s in range(20)}
    assert len(orders) > 1
    assert ifs_search(job, _gpus(1, 1, 1)).order == (0, 1, 2)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10**6))
def test_ifs_agrees_with_enumeration(seed):
    job, cl = enumerable_instance(seed)
    exists = any(check_placement(q, cl, job).overall_feasible
                 for q in enumerate_placements(job, cl))
    try:
        res = ifs_search(job, cl)
    except InfeasibleError:
        assert not exists
        return
    assert exists
    assert check_placement(res.placement, cl, job).overall_feasible
    assert res.expansions <= res.bound


def test_counter_bound_formula():
    job = make_job(2, [2, 1], 2, {TaskKind.SAMPLER: {"cpu": 1.0}, TaskKind.WORKER: {"gpus": 1.0},
                                  TaskKind.PS: {"cpu": 1.0}})
    cl = ClusterSpec(tuple(Machine(i, {"cpu": 3.0, "gpus": 1.0}, 1e9, 1e9) for i in range(2)))
    res = ifs_search(job, cl)
    # per-machine caps: 3 samplers, 1 worker, 2 PSs (capped by their counts)
    assert res.eta == (3, 1, 2)
    M, R = 2, 2
    assert res.bound == M * (3 + 1) * (2 + 1) * (2 + 1) * ((3 + 1) * (1 + 1) * (2 + 1) + 1) * R
    assert res.expansions <= res.bound


def test_cost_examples():
    job = make_job(2, [1], 1, {TaskKind.SAMPLER: {"cpu_cores": 2.0},
                               TaskKind.WORKER: {"cpu_cores": 1.0, "gpus": 1.0}})
    roomy = cluster_of([(1, 1)] * 2, {"cpu_cores": 4.0, "gpus": 2.0})
    p = Placement((0, 1, 0, 0, 1))
    assert placement_cost(p, 100.0, roomy, job) == pytest.approx(100.0)
    tight = cluster_of([(1, 1)] * 2, {"cpu_cores": 2.0, "gpus": 2.0})
    assert placement_cost(p, 100.0, tight, job) == pytest.approx(150.0)
    # cpu 3 of 2.5 (+0.2) and gpus 1 of 0.77 (+0.3)
    two = ClusterSpec((Machine(0, {"cpu_cores": 2.5, "gpus": 1 / 1.3}, 1e9, 1e9),
                       Machine(1, {"cpu_cores": 4.0, "gpus": 2.0}, 1e9, 1e9)))
    assert placement_cost(p, 100.0, two, job) == pytest.approx(150.0)
    with pytest.raises(ValueError):
        placement_cost(p, 0.0, roomy, job)


def test_estimate_colocated_single_iteration_is_stage_sum():
    job = make_job(1, [1], 1)
    p = Placement((0, 0, 0, 0))
    t = estimate_makespan(p, job, cluster_of([(1, 1)]), CONST, est_iters=1)
    assert t == pytest.approx(0.01 + 0.02 + 0.03 + 0.04)


def test_estimate_is_deterministic_and_volume_monotone():
    job = make_job(2, [2], 1)
    cl = cluster_of([(1, 1), (1, 1)])
    p = Placement((0, 1, 0, 1, 0, 1))
    a = estimate_makespan(p, job, cl, CONST, est_iters=5)
    assert a == estimate_makespan(p, job, cl, CONST, est_iters=5)
    doubled = constant_profile({k: v[0] for k, v in CONST.durations.items()},
                               {k: 2 * v[0] for k, v in CONST.volumes.items()})
    assert estimate_makespan(p, job, cl, doubled, est_iters=5) > a


def test_acceptance_probability_closed_form():
    assert acceptance_probability(110.0, 100.0, 0.1) == 1.0
    assert acceptance_probability(100.0, 100.0, 0.1) == 1.0
    assert acceptance_probability(100.0, 110.0, 0.1) == pytest.approx(math.exp(-1), abs=1e-12)
    assert acceptance_probability(100.0, 110.0, 0.1) == pytest.approx(0.3679, abs=1e-4)


def test_zero_budget_returns_initial():
    job, cl, prof = small_search_instance(1)
    res = etp_search(job, cl, prof, budget=0, seed=4, est_iters=3)
    assert res.placement == res.initial
    assert res.trace == ()


@pytest.mark.parametrize("seed", range(4))
def test_etp_result_is_feasible_and_trace_monotone(seed):
    job, cl, prof = small_search_instance(seed)
    res = etp_search(job, cl, prof, budget=150, seed=seed, est_iters=3)
    assert check_placement(res.placement, cl, job).overall_feasible
    bests = [row.best for row in res.trace]
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))
    assert bests[-1] == pytest.approx(res.makespan * 1e3)
    assert [row.z for row in res.trace] == list(range(150))
    assert res.makespan <= estimate_makespan(res.initial, job, cl, prof, est_iters=3)


def test_etp_is_reproducible():
    job, cl, prof = small_search_instance(7)
    a = etp_search(job, cl, prof, budget=60, seed=11, est_iters=2)
    b = etp_search(job, cl, prof, budget=60, seed=11, est_iters=2)
    assert a == b


def _reachable_states(job, cl, seed, steps=40, mu=1.0):
    rng = random.Random(seed)
    p = ifs(job, cl)
    out = [p]
    for _ in range(steps):
        j = rng.choice(job.placeable)
        avail = available_machines(p, j, job, cl, mu)
        if avail:
            p = p.moved(j, rng.choice(avail))
            out.append(p)
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_proposals_are_reversible(seed):
    job, cl, _ = small_search_instance(seed % 50)
    for p in _reachable_states(job, cl, seed):
        assert check_placement(p, cl, job, mu=1.0).overall_feasible
        for j in job.placeable:
            avail = available_machines(p, j, job, cl, 1.0)
            for m in range(cl.n_machines):
                if m == p[j]:
                    assert m not in avail
                    continue
                q = p.moved(j, m)
                ok = check_placement(q, cl, job, mu=1.0).overall_feasible
                assert (m in avail) == ok
                if ok:
                    assert p[j] in available_machines(q, j, job, cl, 1.0)


def test_dgtp_single_machine_is_forced():
    job = make_job(1, [2], 1)
    res = dgtp(job, cluster_of([(1, 1)]), CONST, n_iterations=3, budget=20, est_iters=2)
    assert res.placement == Placement((0,) * len(job.tasks))
    assert res.record.flow_segments == {}


def test_dgtp_on_testbed_shape():
    sc = scenarios.testbed_scenario()
    res = dgtp(sc.job, sc.cluster, scenarios.sim8_profile(1), n_iterations=5, budget=30, est_iters=3)
    assert check_placement(res.placement, sc.cluster, sc.job).overall_feasible
    assert res.record.makespan > 0


@pytest.mark.parametrize("seed", range(3))
def test_dgtp_not_worse_than_its_starting_placement(seed):
    job, cl, prof = small_search_instance(seed)
    res = dgtp(job, cl, prof, n_iterations=4, budget=80, seed=seed, est_iters=4)
    start = simulate(job, cl, res.search.initial, OESPolicy(), prof, 4)
    assert res.record.makespan <= start.makespan + 1e-12


def test_batch_scale_raises_estimate():
    job, cl, prof = small_search_instance(2)
    p = ifs(job, cl)
    assert (estimate_makespan(p, job, cl, scale_batch(prof, 2.0), est_iters=3)
            >= estimate_makespan(p, job, cl, prof, est_iters=3))
