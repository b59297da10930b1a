"""Command-line front end: ``gnnplan <command> [options]``.

Exit codes: 0 success, 1 input error, 2 schedule validation failure,
3 competitive-ratio check failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import baselines
from .bounds import ChainError, OracleRefusal, verify_instance
from .engine import ScheduleRecord, SimulationError, simulate, validate
from .model import (
    ClusterSpec,
    InfeasibleError,
    JobSpec,
    Placement,
    StructureError,
    build_dependency_graph,
    check_placement,
)
from .oes import OESPolicy
from .placement import (
    DEFAULT_BETA,
    DEFAULT_BUDGET,
    DEFAULT_EST_ITERS,
    DEFAULT_MU,
    ETPResult,
    etp_search,
    ifs,
)
from .profiles import (
    Profile,
    ProfileError,
    derive_seed,
    draw_iterations,
    dump_profile,
    load_profile,
    scale_batch,
    synth_profile,
)
from .scenarios import (
    Scenario,
    ScenarioError,
    dump_placement,
    load_placement,
    load_scenario,
    sim8_scenario,
    testbed_scenario,
    tiny_instance,
    write_json,
)

log = logging.getLogger("gnnplan")

EXIT_OK, EXIT_INPUT, EXIT_INVALID, EXIT_BOUND = 0, 1, 2, 3

POLICIES: Dict[str, Callable] = {
    "oes": OESPolicy,
    "fifo": baselines.fifo_policy,
    "omcoflow": baselines.omcoflow_policy,
    "mrtf": baselines.mrtf_policy,
}
# system -> (placement source, policy)
SYSTEMS = {
    "dgtp": ("dgtp", "oes"),
    "distdgl": ("colocated", "fifo"),
    "omcoflow": ("dgtp", "omcoflow"),
    "mrtf": ("dgtp", "mrtf"),
}
BUILTIN_SCENARIOS = {"testbed": testbed_scenario, "sim8": sim8_scenario}


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; argparse's own exit status 2 means validation failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def fmt(x: float) -> str:
    return f"{x:.9g}"


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())


# -- shared option handling ---------------------------------------------------


def _scenario(args) -> Scenario:
    src = args.scenario
    if src in BUILTIN_SCENARIOS:
        sc = BUILTIN_SCENARIOS[src]()
    else:
        sc = load_scenario(src)
    if getattr(args, "iterations", None):
        sc = Scenario(sc.cluster, sc.job.with_iterations(args.iterations))
    return sc


def _profile(args, pmr: Optional[float] = None) -> Profile:
    if getattr(args, "profile", None) and pmr is None:
        return load_profile(args.profile)
    return synth_profile(args.mean_volume, pmr if pmr is not None else args.pmr, args.samples,
                         derive_seed(args.seed, "profile"))


def _search(args, sc: Scenario, prof: Profile, chains: int = 1) -> List[ETPResult]:
    out = []
    for c in range(chains):
        seed = derive_seed(args.seed, "search", c)
        out.append(etp_search(sc.job, sc.cluster, prof, budget=args.budget, mu=args.mu,
                              beta=args.beta, seed=seed, est_iters=args.est_iters))
    return out


def _best(results: Sequence[ETPResult]) -> ETPResult:
    return min(results, key=lambda r: r.makespan)


def _placement(args, sc: Scenario, prof: Profile) -> Placement:
    src = args.placement
    if src == "colocated":
        p = baselines.colocated_placement(sc.job, sc.cluster)
    elif src == "ifs":
        p = ifs(sc.job, sc.cluster, derive_seed(args.seed, "ifs"))
    elif src == "dgtp":
        p = _best(_search(args, sc, prof, getattr(args, "chains", 1))).placement
    elif src.startswith("file:"):
        p = load_placement(src[5:], sc.job)
    else:
        raise InputError(f"unknown placement source {src!r}")
    try:
        rep = check_placement(p, sc.cluster, sc.job)
    except StructureError as exc:
        raise InputError(f"placement: {exc}") from exc
    if not rep.overall_feasible:
        raise InputError(f"placement violates capacities: {rep.violations()[:3]}")
    return p


def _add_scenario_opts(p: argparse.ArgumentParser, iterations: bool = True) -> None:
    p.add_argument("--scenario", default="testbed",
                   help="scenario JSON file, or a built-in: testbed, sim8 (default testbed)")
    p.add_argument("--profile", help="profile JSON file (default: synthetic)")
    p.add_argument("--mean-volume", type=float, default=8e6,
                   help="synthetic graph-store to sampler mean volume, bytes")
    p.add_argument("--pmr", type=float, default=1.16, help="synthetic peak-to-mean ratio")
    p.add_argument("--samples", type=int, default=50, help="synthetic samples per class")
    if iterations:
        p.add_argument("--iterations", "-N", type=int, help="training iterations (default: scenario)")


def _add_search_opts(p: argparse.ArgumentParser, budget: int = DEFAULT_BUDGET) -> None:
    p.add_argument("--budget", type=int, default=budget, help="ETP transitions")
    p.add_argument("--mu", type=float, default=DEFAULT_MU, help="capacity relaxation for proposals")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA, help="acceptance temperature")
    p.add_argument("--est-iters", type=int, default=DEFAULT_EST_ITERS,
                   help="iterations simulated per placement estimate")


def _positive(name: str, value) -> None:
    if value is not None and value < 1:
        raise InputError(f"{name} must be >= 1")


# -- commands -------------------------------------------------------------------


def cmd_gen_profile(args, out: Path) -> int:
    if args.pmr < 1:
        raise InputError("--pmr must be >= 1")
    prof = synth_profile(args.mean_volume, args.pmr, args.samples, derive_seed(args.seed, "profile"))
    write_json(dump_profile(prof), out / "profile.json")
    log.info("wrote %s", out / "profile.json")
    return EXIT_OK


def export_record(rec: ScheduleRecord, job: JobSpec, cluster: ClusterSpec, out: Path) -> None:
    (out / "makespan.txt").write_text(fmt(rec.makespan) + "\n")
    label = lambda j: job.tasks[j].label  # noqa: E731
    write_csv(out / "task_starts.csv", ["task", "iteration", "start_s", "end_s"],
              [(label(j), n, rec.task_starts[(j, n)], rec.task_ends[(j, n)])
               for j, n in sorted(rec.task_starts, key=lambda k: (k[1], k[0]))])
    rows = []
    for (s, d, n), segs in sorted(rec.flow_segments.items()):
        for t0, t1, rate in segs:
            rows.append((label(s), label(d), n, t0, t1, rate / 1e9))
    write_csv(out / "flow_segments.csv", ["src", "dst", "iteration", "t0_s", "t1_s", "rate_gbps"], rows)
    M = cluster.n_machines
    rows = []
    for t, rin, rout in rec.nic_util:
        for m in range(M):
            rows.append((t, m, rin[m] / 1e9, rout[m] / 1e9,
                         rin[m] / cluster.machines[m].bw_in, rout[m] / cluster.machines[m].bw_out))
    write_csv(out / "nic_util.csv", ["t_s", "machine", "in_gbps", "out_gbps", "in_util", "out_util"],
              rows)


def cmd_simulate(args, out: Path) -> int:
    _positive("--iterations", args.iterations)
    sc = _scenario(args)
    prof = _profile(args)
    p = _placement(args, sc, prof)
    if args.policy == "oes":
        policy = OESPolicy(work_conserving=args.work_conserving)
    else:
        policy = POLICIES[args.policy]()
    try:
        rec = simulate(sc.job, sc.cluster, p, policy, prof, sc.job.n_iterations, tick=args.tick)
    except SimulationError as exc:
        print(f"simulation rejected: {exc}", file=sys.stderr)
        return EXIT_INVALID
    draws = draw_iterations(prof, sc.job, build_dependency_graph(sc.job), sc.job.n_iterations)
    violations = validate(rec, sc.job, sc.cluster, p, draws)
    export_record(rec, sc.job, sc.cluster, out)
    write_json(dump_placement(p, sc.job), out / "placement.json")
    if violations:
        for v in violations[:20]:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVALID
    log.info("makespan %s s (%s, %d iterations)", fmt(rec.makespan), policy.name, sc.job.n_iterations)
    return EXIT_OK


def cmd_search(args, out: Path) -> int:
    _positive("--chains", args.chains)
    _positive("--est-iters", args.est_iters)
    if args.budget < 0:
        raise InputError("--budget must be >= 0")
    sc = _scenario(args)
    prof = _profile(args)
    results = _search(args, sc, prof, args.chains)
    best = _best(results)
    write_json(dump_placement(best.placement, sc.job), out / "placement.json")
    rows = [(c, r.z, r.cost, int(r.accepted), int(r.feasible), r.best)
            for c, res in enumerate(results) for r in res.trace]
    write_csv(out / "search_trace.csv", ["chain", "z", "cost", "accepted", "feasible", "best_ms"], rows)
    log.info("best estimated makespan %s s over %d chains", fmt(best.makespan), len(results))
    return EXIT_OK


def _run_systems(args, sc: Scenario, prof: Profile, systems: Sequence[str],
                 seeds: int) -> List[Tuple[str, int, float]]:
    placements: Dict[str, Placement] = {}
    for name in dict.fromkeys(systems):
        src = SYSTEMS[name][0]
        if src not in placements:
            if src == "dgtp":
                placements[src] = _best(_search(args, sc, prof)).placement
            else:
                placements[src] = baselines.colocated_placement(sc.job, sc.cluster)
    rows = []
    for k in range(seeds):
        run_prof = prof.with_seed(derive_seed(args.seed, "eval", k))
        for name in systems:
            src, pol = SYSTEMS[name]
            rec = simulate(sc.job, sc.cluster, placements[src], POLICIES[pol](), run_prof,
                           sc.job.n_iterations, record=False)
            rows.append((name, k, rec.makespan))
    return rows


def _parse_systems(text: str) -> List[str]:
    systems = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in systems if s not in SYSTEMS]
    if bad:
        raise InputError(f"unknown system(s) {bad}; choose from {sorted(SYSTEMS)}")
    return systems


def cmd_compare(args, out: Path) -> int:
    _positive("--seeds", args.seeds)
    _positive("--iterations", args.iterations)
    systems = _parse_systems(args.systems)
    if len(systems) < 2:
        raise InputError("compare needs at least two systems")
    sc = _scenario(args)
    prof = _profile(args)
    rows = _run_systems(args, sc, prof, systems, args.seeds)
    means = {}
    for name in dict.fromkeys(systems):
        vals = [m for s, _, m in rows if s == name]
        means[name] = sum(vals) / len(vals)
    table = [(s, k, m, "") for s, k, m in rows]
    ref = means.get("dgtp")
    for name, mean in means.items():
        red = 100.0 * (mean - ref) / mean if ref is not None else ""
        table.append((name, "mean", mean, red))
    write_csv(out / "compare.csv", ["system", "seed", "makespan_s", "dgtp_reduction_pct"], table)
    for name, mean in means.items():
        log.info("%-9s mean makespan %s s", name, fmt(mean))
    return EXIT_OK


def cmd_sweep(args, out: Path) -> int:
    _positive("--seeds", args.seeds)
    systems = _parse_systems(args.systems)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values:
        raise InputError("--values is empty")
    sc = _scenario(args)
    base = _profile(args)
    rows = []
    for v in values:
        if args.axis == "batch_scale":
            if v <= 0:
                raise InputError("batch scale must be > 0")
            prof = scale_batch(base, v)
        else:
            if v < 1:
                raise InputError("pmr must be >= 1")
            prof = _profile(args, pmr=v)
        for name, k, m in _run_systems(args, sc, prof, systems, args.seeds):
            rows.append((args.axis, v, name, k, m))
    write_csv(out / "sweep.csv", ["axis", "value", "system", "seed", "makespan_s"], rows)
    return EXIT_OK


def cmd_verify(args, out: Path) -> int:
    _positive("--instances", args.instances)
    rows = []
    failed = 0
    for i in range(args.instances):
        inst = tiny_instance(derive_seed(args.seed, "verify", i), args.tick)
        try:
            res = verify_instance(inst.job, inst.cluster, inst.placement, inst.draws, inst.tick)
        except (ChainError, OracleRefusal) as exc:
            print(f"instance {i}: {exc}", file=sys.stderr)
            failed += 1
            rows.append((i, "", "", "", "", "", "FAIL"))
            continue
        status = "PASS" if res.passed else "FAIL"
        failed += not res.passed
        rows.append((i, res.delta, res.t_oes, res.t_lb, res.t_star, res.ratio, status))
        if not args.quiet:
            print(f"instance {i}: delta={res.delta} T_OES={fmt(res.t_oes)} T_LB={fmt(res.t_lb)} "
                  f"T*={fmt(res.t_star)} ratio={fmt(res.ratio)} {status}")
    write_csv(out / "verify.csv", ["instance", "delta", "t_oes_s", "t_lb_s", "t_star_s", "ratio", "status"],
              rows)
    print(f"{args.instances - failed}/{args.instances} instances PASS")
    return EXIT_BOUND if failed else EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="gnnplan", description=__doc__.splitlines()[0])
    root.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    root.add_argument("--out", default=".", help="output directory (created if missing)")
    root.add_argument("--quiet", action="store_true", help="only print errors")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-profile", help="write a synthetic profile")
    p.add_argument("--mean-volume", type=float, default=8e6, help="graph-store to sampler mean, bytes")
    p.add_argument("--pmr", type=float, default=1.16, help="peak-to-mean ratio")
    p.add_argument("--samples", type=int, default=50, help="samples per class")
    p.set_defaults(func=cmd_gen_profile)

    p = sub.add_parser("simulate", help="run one placement + policy and export the schedule")
    _add_scenario_opts(p)
    _add_search_opts(p, budget=200)
    p.add_argument("--policy", choices=sorted(POLICIES), default="oes")
    p.add_argument("--placement", default="ifs",
                   help="dgtp, colocated, ifs, or file:<path> (default ifs)")
    p.add_argument("--tick", type=float, help="discrete time step in seconds (default event-driven)")
    p.add_argument("--work-conserving", action="store_true",
                   help="hand leftover NIC capacity to active flows (oes only)")
    p.set_defaults(func=cmd_simulate, chains=1)

    p = sub.add_parser("search", help="ETP placement search")
    _add_scenario_opts(p, iterations=False)
    _add_search_opts(p)
    p.add_argument("--chains", type=int, default=1, help="independent chains")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("compare", help="makespans of several systems over seeds")
    _add_scenario_opts(p)
    _add_search_opts(p, budget=200)
    p.add_argument("--systems", default="dgtp,distdgl,omcoflow,mrtf")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="compare across batch scales or PMRs")
    _add_scenario_opts(p)
    _add_search_opts(p, budget=200)
    p.add_argument("--axis", choices=("batch_scale", "pmr"), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--systems", default="dgtp,distdgl,omcoflow,mrtf")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check the competitive-ratio bounds on random tiny instances")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tick", type=float, default=0.01, help="oracle time grid, seconds")
    p.set_defaults(func=cmd_verify)
    return root


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, out)
    except (InputError, ScenarioError, ProfileError, StructureError, InfeasibleError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
