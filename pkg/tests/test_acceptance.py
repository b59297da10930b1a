"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time
from pathlib import Path

import pytest

from conftest import ACCEPTANCE
from gnnplan import cli
from gnnplan.baselines import colocated_placement, fifo_policy, mrtf_policy, omcoflow_policy
from gnnplan.bounds import chain_lower_bound, extract_chain, path_bound, verify_instance
from gnnplan.engine import simulate, validate
from gnnplan.model import InfeasibleError, build_dependency_graph, check_placement, one_iteration_flows
from gnnplan.oes import OESPolicy, degree_snapshot
from gnnplan.placement import enumerate_placements, estimate_makespan, etp_search, ifs_search
from gnnplan.profiles import derive_seed, draw_iterations
from gnnplan.scenarios import (
    enumerable_instance,
    sim8_profile,
    sim8_scenario,
    random_instance,
    small_search_instance,
    tiny_instance,
)

REL = 1e-9
CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# 8-machine study settings; the search budget is cut to keep the suite minutes long
STUDY_ITERATIONS = 20
STUDY_SEEDS = 20
STUDY_BUDGET = 400
STUDY_EST_ITERS = 5
PMRS = (1.2, 1.5, 2.0)
PMR_SEEDS = 10


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)


def sweep_instance(seed):
    # 2-16 machines, 1-20 workers, 1-4 samplers each, N in [1, 10]; N shrinks past 400 flows
    return random_instance(seed, machines=(2, 16), workers=(1, 20), samplers=(1, 4),
                           iterations=(1, 10), max_flows=400)


class DegreeAudit(OESPolicy):
    """OES that records any event where a machine degree exceeds its one-iteration value."""

    def start(self, state):
        super().start(state)
        fs = one_iteration_flows(state.placement, state.graph, len(state.bw_in))
        self.hat_in, self.hat_out = fs.deg_in, fs.deg_out
        self.events = 0
        self.breaches = 0

    def assign_rates(self, state):
        super().assign_rates(state)
        snap = degree_snapshot(state)
        self.events += 1
        if (any(a > b for a, b in zip(snap.deg_in, self.hat_in))
                or any(a > b for a, b in zip(snap.deg_out, self.hat_out))):
            self.breaches += 1


@pytest.fixture(scope="module")
def sweep_results():
    """Criterion 1 sweep with the degree audit inline; shared with criterion 4."""
    t0 = time.perf_counter()
    bad, events, breaches = [], 0, 0
    for seed in range(200):
        inst = sweep_instance(seed)
        for make in (DegreeAudit, fifo_policy, mrtf_policy, omcoflow_policy):
            pol = make()
            rec = simulate(inst.job, inst.cluster, inst.placement, pol, draws=inst.draws)
            v = validate(rec, inst.job, inst.cluster, inst.placement, inst.draws)
            if v:
                bad.append((seed, pol.name, v[0]))
            if isinstance(pol, DegreeAudit):
                events += pol.events
                breaches += pol.breaches
    return {"bad": bad, "events": events, "breaches": breaches,
            "seconds": time.perf_counter() - t0}


def test_criterion_1_constraint_validity(sweep_results):
    r = sweep_results
    ok = not r["bad"] and r["seconds"] < 60
    report(1, ok, f"200 instances x 4 policies, {len(r['bad'])} invalid runs, "
                  f"{r['seconds']:.1f} s")
    assert not r["bad"], r["bad"][:5]
    assert r["seconds"] < 60


def test_criterion_2_competitive_ratio():
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for i in range(100):
        inst = tiny_instance(i)
        res = verify_instance(inst.job, inst.cluster, inst.placement, inst.draws, inst.tick)
        if not res.passed:
            failures.append((i, {k: v for k, v in res.checks.items() if not v}))
        worst = max(worst, res.t_oes / (max(res.delta, 1) * res.t_star))
    secs = time.perf_counter() - t0
    ok = not failures and secs < 300
    report(2, ok, f"100 oracle instances, {len(failures)} failures, "
                  f"max T_OES/(delta T*) = {worst:.3f}, {secs:.1f} s")
    assert not failures, failures[:5]
    assert secs < 300


def test_criterion_3_chain_inequality():
    bad = []
    for seed in range(200):
        inst = sweep_instance(seed)
        g = build_dependency_graph(inst.job)
        rec = simulate(inst.job, inst.cluster, inst.placement, OESPolicy(), draws=inst.draws,
                       graph=g)
        ch = extract_chain(rec, inst.job, inst.placement, g)
        statics = one_iteration_flows(inst.placement, g, inst.cluster.n_machines)
        T = rec.makespan
        tol = REL * T
        covers = abs(ch.parts[0].start) <= tol and abs(ch.covered - T) <= tol
        if not covers or T > path_bound(ch, inst.cluster, statics) + tol:
            bad.append(seed)
        assert chain_lower_bound(ch, inst.cluster) <= T + tol
    report(3, not bad, f"200 instances, {len(bad)} chain or path-bound failures")
    assert not bad


def test_criterion_4_degree_bound(sweep_results):
    r = sweep_results
    ok = r["breaches"] == 0 and r["events"] > 0
    report(4, ok, f"{r['events']} rate updates audited, {r['breaches']} degree breaches")
    assert ok


def test_criterion_5_ifs_vs_enumeration():
    disagree, over, feasible = [], [], 0
    for seed in range(500):
        job, cl = enumerable_instance(seed)
        exists = any(check_placement(q, cl, job).overall_feasible
                     for q in enumerate_placements(job, cl))
        try:
            res = ifs_search(job, cl)
            found = check_placement(res.placement, cl, job).overall_feasible
            if res.expansions > res.bound:
                over.append(seed)
        except InfeasibleError:
            found = False
        feasible += exists
        if found != exists:
            disagree.append(seed)
    ok = not disagree and not over
    report(5, ok, f"500 instances ({feasible} feasible), {len(disagree)} disagreements, "
                  f"{len(over)} counter overruns")
    assert ok, (disagree[:5], over[:5])


def test_criterion_6_etp_quality():
    within, infeasible, nonmonotone = 0, 0, 0
    runs = 20
    for s in range(runs):
        job, cl, prof = small_search_instance(s)
        g = build_dependency_graph(job)
        draws = draw_iterations(prof, job, g, 20)
        best = min(estimate_makespan(p, job, cl, draws=draws, est_iters=20, graph=g)
                   for p in enumerate_placements(job, cl)
                   if check_placement(p, cl, job).overall_feasible)
        res = etp_search(job, cl, prof, budget=2000, mu=1.0, beta=0.1, seed=s, est_iters=20,
                         graph=g)
        within += res.makespan <= 1.05 * best
        infeasible += not check_placement(res.placement, cl, job).overall_feasible
        bests = [row.best for row in res.trace]
        nonmonotone += any(b > a for a, b in zip(bests, bests[1:]))
    ok = within >= 0.8 * runs and infeasible == 0 and nonmonotone == 0
    report(6, ok, f"{within}/{runs} runs within 5% of the enumerated best, "
                  f"{infeasible} infeasible, {nonmonotone} non-monotone traces")
    assert ok


@pytest.fixture(scope="module")
def study():
    sc = sim8_scenario(n_iterations=STUDY_ITERATIONS)
    prof = sim8_profile(0)
    search = etp_search(sc.job, sc.cluster, prof, budget=STUDY_BUDGET, seed=0,
                        est_iters=STUDY_EST_ITERS)
    return sc, prof, search.placement, colocated_placement(sc.job, sc.cluster)


def test_criterion_7_simulation_direction(study):
    sc, prof, placed, colocated = study
    systems = {
        "dgtp": (placed, OESPolicy),
        "distdgl": (colocated, fifo_policy),
        "fifo": (placed, fifo_policy),
        "omcoflow": (placed, omcoflow_policy),
        "mrtf": (placed, mrtf_policy),
    }
    spans = {k: [] for k in systems}
    for k in range(STUDY_SEEDS):
        run_prof = prof.with_seed(derive_seed(0, "eval", k))
        for name, (p, make) in systems.items():
            rec = simulate(sc.job, sc.cluster, p, make(), run_prof, STUDY_ITERATIONS, record=False)
            spans[name].append(rec.makespan)
    mean = {k: sum(v) / len(v) for k, v in spans.items()}
    gain = {k: 100 * (m - mean["dgtp"]) / m for k, m in mean.items() if k != "dgtp"}
    ok = (all(mean["dgtp"] <= m for m in mean.values())
          and all(gain[k] >= 5 for k in ("mrtf", "fifo", "distdgl")))
    report(7, ok, f"{STUDY_SEEDS} seeds, DGTP {mean['dgtp']:.3f} s; reduction vs "
                  + ", ".join(f"{k} {g:.1f}%" for k, g in gain.items()))
    assert ok


def test_criterion_8_pmr_stability(study):
    sc, _, placed, _ = study
    ratios = []
    for k in range(PMR_SEEDS):
        seed = derive_seed(0, "pmr", k)
        spans = [simulate(sc.job, sc.cluster, placed, OESPolicy(), sim8_profile(seed, pmr),
                          STUDY_ITERATIONS, record=False).makespan for pmr in PMRS]
        ratios.append(max(spans) / min(spans))
    ok = max(ratios) <= 1.2
    report(8, ok, f"{PMR_SEEDS} seeds over PMR {PMRS}, worst max/min {max(ratios):.3f}")
    assert ok


def _outputs(path: Path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


def test_criterion_9_cli_determinism(tmp_path):
    minimal = str(CONFIGS / "minimal.json")
    fast = ["--budget", "20", "--est-iters", "2"]
    commands = {
        "gen-profile": ["gen-profile", "--pmr", "1.5"],
        "simulate": ["simulate", "--scenario", minimal, "--placement", "dgtp", *fast],
        "search": ["search", "--scenario", minimal, "--chains", "2", *fast],
        "compare": ["compare", "--scenario", minimal, "--seeds", "2", *fast],
        "sweep": ["sweep", "--scenario", minimal, "--axis", "pmr", "--values", "1.2,2",
                  "--seeds", "2", *fast],
        "verify": ["verify", "--instances", "2"],
    }
    differing = []
    for name, argv in commands.items():
        outs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            code = cli.main(["--seed", "9", "--out", str(out), "--quiet", *argv])
            assert code == 0, name
            outs.append(_outputs(out))
        if outs[0] != outs[1] or not any(k.endswith(".csv") or k.endswith(".json")
                                         for k in outs[0]):
            differing.append(name)
    ok = not differing
    report(9, ok, f"{len(commands)} commands run twice, differing: {differing or 'none'}")
    assert ok
