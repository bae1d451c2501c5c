"""Command-line harness: run solver x problem x oracle combinations.

Configuration comes from a JSON file, with every flag overriding the
corresponding field.  Each (solver, seed) run writes a trace CSV and a
complexity ledger; a run directory additionally gets a summary JSON with
mean/min/max best-gap curves and an SVG plot of the mean curve per solver.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import json
import os
import sys

import numpy as np

from .domains import domain_from_config
from .errors import ConfigError, FWBilevelError
from .hypergrad import HypergradConfig, make_hypergradient_oracle
from .oracles import ErrorContract, ExactOracle, PerturbedOracle
from .plotting import write_gap_plot
from .problems import (
    DistillationInstance,
    default_toy,
    distillation_problem,
    generate_sbm_multilayer,
    load_csv_dataset,
    response_to_classes,
    ssl_fixed_point_problem,
    synthetic_blobs,
)
from .solvers import (
    Iterate,
    SolverConfig,
    run_asfw,
    run_fw,
    run_pwfw,
    write_report_json,
    write_trace_csv,
)
from .stepsize import StepsizeConfig

SOLVERS = {"fw": run_fw, "asfw": run_asfw, "pwfw": run_pwfw}
PROBLEMS = ("toy", "ssl", "distill", "custom-polytope")
HYPERGRAD_METHODS = ("exact", "perturbed", "itd", "aid")

DEFAULT_INNER_ITERS = {"toy": 100, "ssl": 500, "distill": 50}


# -- configuration -------------------------------------------------------------


def parse_seeds(text):
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    text = str(text)
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok != ""]


def resolve_config(raw):
    """Fill defaults and validate; raises ConfigError naming the bad field."""
    cfg = copy.deepcopy(raw)
    problem = cfg.get("problem")
    if problem not in PROBLEMS:
        raise ConfigError(f"problem must be one of {PROBLEMS}, got {problem!r}")

    if "tau" not in cfg or cfg["tau"] is None:
        raise ConfigError("missing required field: tau")
    tau = float(cfg["tau"])
    if tau <= 0:
        raise ConfigError("tau must be positive")

    sigma = float(cfg.get("sigma", 0.0))
    if not (0.0 <= sigma < 1.0 / 3.0):
        raise ConfigError("σ must lie in [0, 1/3)")

    solver = cfg.get("solver", "fw")
    if solver == "all":
        solvers = list(SOLVERS)
    elif isinstance(solver, str):
        solvers = [tok.strip() for tok in solver.split(",") if tok.strip()]
    else:
        solvers = list(solver)
    for s in solvers:
        if s not in SOLVERS:
            raise ConfigError(f"solver must be among {tuple(SOLVERS)}, got {s!r}")
    if not solvers:
        raise ConfigError("solver list is empty")

    seeds = parse_seeds(cfg.get("seeds", [0]))
    if not seeds:
        raise ConfigError("seeds must be nonempty")

    R = int(cfg.get("R", 1))
    if R < 1:
        raise ConfigError("R must be >= 1")

    hg = dict(cfg.get("hypergrad", {"method": "exact"}))
    method = hg.get("method", "exact")
    if method not in HYPERGRAD_METHODS:
        raise ConfigError(f"hypergrad.method must be among {HYPERGRAD_METHODS}")
    hg.setdefault("t", DEFAULT_INNER_ITERS.get(problem, 100))
    hg.setdefault("k", None)
    hg.setdefault("auto_iters", False)
    hg.setdefault("epsilon", 0.5)
    hg.setdefault("direction", "random")
    hg["method"] = method
    if method in ("itd", "aid") and problem == "custom-polytope":
        raise ConfigError("custom-polytope has no lower level; use exact or perturbed")
    if hg["auto_iters"] and sigma == 0.0:
        raise ConfigError("hypergrad.auto_iters needs sigma > 0")

    pcfg = dict(cfg.get("problem_cfg", {}))
    pcfg.setdefault("seed", 0)
    if problem == "toy":
        pcfg.setdefault("outer_dim", 10)
        pcfg.setdefault("inner_dim", 8)
        pcfg.setdefault("q", 0.5)
    elif problem == "ssl":
        pcfg.setdefault("n", 70)
        pcfg.setdefault("c", 5)
        pcfg.setdefault("k_true", 3)
        pcfg.setdefault("p_in", [0.35, 0.30, 0.25])
        pcfg.setdefault("p_out", [0.03, 0.04, 0.05])
        pcfg.setdefault("drift", 0.10)
        pcfg.setdefault("noise_ratio", 0.1)
        pcfg.setdefault("weight_range", [0.5, 1.5])
    elif problem == "distill":
        pcfg.setdefault("m", 500)
        pcfg.setdefault("d", 20)
        pcfg.setdefault("classes", 3)
        pcfg.setdefault("n_val", 200)
        pcfg.setdefault("budget_fraction", 0.001)
        pcfg.setdefault("reg", 2e3)
        pcfg.setdefault("inner_step", 1e-7)
        pcfg.setdefault("dataset_csv", None)
    elif problem == "custom-polytope":
        if "domain" not in pcfg:
            raise ConfigError("custom-polytope needs problem_cfg.domain")

    stepsize = dict(cfg.get("stepsize", {}))
    stepsize.setdefault("rule", "exact")
    try:
        StepsizeConfig.from_config(stepsize)
    except ValueError as exc:
        raise ConfigError(f"stepsize: {exc}") from exc

    resolved = {
        "problem": problem,
        "problem_cfg": pcfg,
        "solver": solvers,
        "hypergrad": hg,
        "tau": tau,
        "sigma": sigma,
        "R": R,
        "max_iters": cfg.get("max_iters"),
        "stepsize": stepsize,
        "lipschitz": cfg.get("lipschitz", "auto-sample"),
        "fstar": cfg.get("fstar"),
        "seeds": seeds,
        "jobs": int(cfg.get("jobs", 1)),
        "output_dir": cfg.get("output_dir", "fwbilevel-out"),
        "audit": bool(cfg.get("audit", False)),
    }
    return resolved


def load_config(path=None, overrides=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return resolve_config(raw)


# -- problem construction --------------------------------------------------------


class _Bundle:
    """Everything a single run needs: domain, oracle factory, initial point."""

    def __init__(self, domain, make_oracle, initial_point, fstar=None):
        self.domain = domain
        self.make_oracle = make_oracle
        self.initial_point = initial_point
        self.fstar = fstar


def _toy_bundle(resolved):
    pcfg = resolved["problem_cfg"]
    toy = default_toy(
        outer_dim=pcfg["outer_dim"],
        inner_dim=pcfg["inner_dim"],
        q=pcfg["q"],
        seed=pcfg["seed"],
    )
    problem = toy.fixed_point_problem()
    domain = toy.domain

    def make_oracle(seed):
        return _oracle_for(resolved, domain, problem, toy.upper_value,
                           toy.analytic_hypergradient, seed)

    def initial_point(seed, solver, oracle=None):
        return _sampled_init(domain, seed, solver, oracle)

    return _Bundle(domain, make_oracle, initial_point)


def _ssl_bundle(resolved):
    pcfg = resolved["problem_cfg"]
    instance = generate_sbm_multilayer(
        n=pcfg["n"],
        c=pcfg["c"],
        k_true=pcfg["k_true"],
        p_in=tuple(pcfg["p_in"]),
        p_out=tuple(pcfg["p_out"]),
        drift=pcfg["drift"],
        noise_ratio=pcfg["noise_ratio"],
        weight_range=tuple(pcfg["weight_range"]),
        seed=pcfg["seed"],
    )
    problem = ssl_fixed_point_problem(instance)
    domain = problem.outer_domain

    def make_oracle(seed):
        return _oracle_for(resolved, domain, problem, problem.core.exact_value,
                           problem.core.exact_hypergradient, seed)

    def initial_point(seed, solver, oracle=None):
        return _sampled_init(domain, seed, solver, oracle)

    return _Bundle(domain, make_oracle, initial_point)


def _distill_bundle(resolved):
    pcfg = resolved["problem_cfg"]
    if pcfg.get("dataset_csv"):
        X, response = load_csv_dataset(pcfg["dataset_csv"])
        y = response_to_classes(response, pcfg["classes"])
        n_val = min(pcfg["n_val"], len(y) // 5)
        m = len(y) - n_val
        Xt, yt, Xv, yv = X[:m], y[:m], X[m:], y[m:]
    else:
        Xt, yt, Xv, yv = synthetic_blobs(
            m=pcfg["m"], d=pcfg["d"], n_classes=pcfg["classes"],
            n_val=pcfg["n_val"], seed=pcfg["seed"],
        )
    budget = pcfg["budget_fraction"] * len(yt)
    instance = DistillationInstance(Xt, yt, Xv, yv, budget=budget, reg=pcfg["reg"])
    problem = distillation_problem(
        instance,
        inner_iters=resolved["hypergrad"]["t"],
        inner_step=pcfg["inner_step"],
        init_seed=pcfg["seed"],
    )
    domain = instance.domain

    def make_oracle(seed):
        return _oracle_for(resolved, domain, problem, problem.core.exact_upper_value,
                           problem.core.exact_hypergradient, seed)

    def initial_point(seed, solver, oracle=None):
        v0 = instance.uniform_init()
        if solver in ("asfw", "pwfw"):
            if oracle is not None:
                vert, vid = domain.lmo(oracle.evaluate_gradient(v0))
            else:
                vert, vid = domain.nearest_vertex(v0)
            return Iterate(vert, {vid: 1.0})
        return Iterate.from_point(v0)

    return _Bundle(domain, make_oracle, initial_point)


def _custom_bundle(resolved):
    pcfg = resolved["problem_cfg"]
    domain = domain_from_config(pcfg["domain"])
    rng = np.random.default_rng(pcfg["seed"])
    center = np.asarray(
        pcfg.get("center", domain.sample(rng)), dtype=float
    )

    def f(x):
        return 0.5 * float(np.sum((x - center) ** 2))

    def grad(x):
        return x - center

    def make_oracle(seed):
        base = ExactOracle(f, grad, domain)
        if resolved["hypergrad"]["method"] == "perturbed":
            contract = ErrorContract(resolved["sigma"], resolved["tau"])
            return PerturbedOracle(
                base, contract, domain, seed=seed,
                direction=resolved["hypergrad"]["direction"],
                audit=resolved["audit"],
            )
        return base

    def initial_point(seed, solver, oracle=None):
        return _sampled_init(domain, seed, solver, oracle)

    return _Bundle(domain, make_oracle, initial_point)


def _sampled_init(domain, seed, solver, oracle=None):
    rng = np.random.default_rng(1_000_003 + seed)
    x = domain.sample(rng)
    if solver in ("asfw", "pwfw"):
        # Vertex start per the active-set algorithms: take the LMO vertex of
        # the estimated gradient at the sampled point (a full first FW step).
        if oracle is not None:
            vert, vid = domain.lmo(oracle.evaluate_gradient(x))
        else:
            vert, vid = domain.nearest_vertex(x)
        return Iterate(vert, {vid: 1.0})
    return Iterate.from_point(x)


def _oracle_for(resolved, domain, problem, exact_value, exact_grad, seed):
    method = resolved["hypergrad"]["method"]
    if method == "exact":
        return ExactOracle(exact_value, exact_grad, domain)
    if method == "perturbed":
        base = ExactOracle(exact_value, exact_grad, domain)
        contract = ErrorContract(resolved["sigma"], resolved["tau"])
        return PerturbedOracle(
            base, contract, domain, seed=seed,
            direction=resolved["hypergrad"]["direction"], audit=resolved["audit"],
        )
    hg = resolved["hypergrad"]
    hcfg = HypergradConfig(
        method=method,
        t=int(hg["t"]),
        k=None if hg["k"] is None else int(hg["k"]),
        epsilon=float(hg["epsilon"]),
        auto_iters=bool(hg["auto_iters"]),
    )
    contract = (
        ErrorContract(resolved["sigma"], resolved["tau"]) if resolved["sigma"] > 0 else None
    )
    return make_hypergradient_oracle(problem, hcfg, contract)


def build_bundle(resolved):
    kind = resolved["problem"]
    if kind == "toy":
        return _toy_bundle(resolved)
    if kind == "ssl":
        return _ssl_bundle(resolved)
    if kind == "distill":
        return _distill_bundle(resolved)
    return _custom_bundle(resolved)


# -- running ----------------------------------------------------------------------


def _solver_cfg(resolved):
    return SolverConfig(
        tau=resolved["tau"],
        sigma=resolved["sigma"],
        max_iters=resolved["max_iters"],
        swap_cap=resolved["R"],
        stepsize=StepsizeConfig.from_config(resolved["stepsize"]),
        lipschitz=resolved["lipschitz"],
        fstar=resolved["fstar"],
    )


def best_gap_curve(trace):
    """Running minimum of the recorded FW gap (exact channel when present)."""
    best = float("inf")
    curve = []
    for rec in trace:
        gap = rec.g_exact if rec.g_exact is not None else rec.g_tilde
        best = min(best, gap)
        curve.append(best)
    return curve


def write_complexity_ledger(trace, t_used, k_used, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["outer_iter", "t_used", "k_used", "cumulative_inner_iters"])
        total = 0
        for rec in trace:
            total += rec.inner_iters
            writer.writerow([rec.iter, t_used, k_used, total])


def run_single(resolved, solver, seed, out_dir):
    """One (solver, seed) run; writes its trace and ledger, returns summary data."""
    bundle = build_bundle(resolved)
    oracle = bundle.make_oracle(seed)
    cfg = _solver_cfg(resolved)
    cfg.lipschitz_seed = seed
    x0 = bundle.initial_point(seed, solver, oracle)
    report = SOLVERS[solver](oracle, bundle.domain, x0, cfg)

    os.makedirs(out_dir, exist_ok=True)
    write_trace_csv(report.trace, os.path.join(out_dir, f"trace_{seed}.csv"))
    t_used = getattr(oracle, "t", 0)
    k_used = getattr(oracle, "k", 0)
    write_complexity_ledger(
        report.trace, t_used, k_used,
        os.path.join(out_dir, f"complexity_ledger_{seed}.csv"),
    )
    if resolved["audit"] and hasattr(oracle, "write_audit_csv"):
        oracle.write_audit_csv(os.path.join(out_dir, f"oracle_audit_{seed}.csv"))
    write_report_json(
        report, os.path.join(out_dir, f"report_{seed}.json"),
        extra={"solver": solver, "seed": seed},
    )
    return {
        "seed": seed,
        "report": report.to_dict(),
        "best_gap_curve": best_gap_curve(report.trace),
        "eval_count": oracle.eval_count,
    }


def _aggregate_curves(curves):
    length = max(len(c) for c in curves)
    padded = np.array([c + [c[-1]] * (length - len(c)) for c in curves])
    return (
        padded.mean(axis=0).tolist(),
        padded.min(axis=0).tolist(),
        padded.max(axis=0).tolist(),
    )


def run_config(resolved, echo=print):
    out_root = resolved["output_dir"]
    os.makedirs(out_root, exist_ok=True)
    solvers = resolved["solver"]
    summary = {"config": resolved, "solvers": {}}
    plot_series = []
    for solver in solvers:
        out_dir = out_root if len(solvers) == 1 else os.path.join(out_root, solver)
        jobs = max(1, resolved["jobs"])
        args = [(resolved, solver, seed, out_dir) for seed in resolved["seeds"]]
        if jobs == 1 or len(args) == 1:
            results = [run_single(*a) for a in args]
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_single_star, args))
        results.sort(key=lambda r: r["seed"])
        curves = [r["best_gap_curve"] for r in results]
        mean_c, min_c, max_c = _aggregate_curves(curves)
        summary["solvers"][solver] = {
            "per_seed": {str(r["seed"]): r["report"] for r in results},
            "mean_best_gap": mean_c,
            "min_best_gap": min_c,
            "max_best_gap": max_c,
        }
        plot_series.append((solver, mean_c))
        for r in results:
            echo(
                f"[{solver} seed={r['seed']}] {r['report']['termination']} "
                f"iters={r['report']['n_iters']} best_gap={r['report']['best_gap']}"
            )
    with open(os.path.join(out_root, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_gap_plot(os.path.join(out_root, "gap_plot.svg"), plot_series)
    return 0


def _run_single_star(args):
    return run_single(*args)


# -- argument parsing ----------------------------------------------------------


def _add_common_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--solver", help="fw | asfw | pwfw | comma list | all")
    p.add_argument("--hypergrad", choices=HYPERGRAD_METHODS)
    p.add_argument("--tau", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--R", type=int, dest="R")
    p.add_argument("--t", type=int, help="fixed inner iterations for itd/aid")
    p.add_argument("--auto-iters", action="store_true", default=None)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--seeds", help="e.g. 0..4 or 0,3,7")
    p.add_argument("--jobs", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--audit", action="store_true", default=None)


def _overrides_from_args(args):
    over = {
        "problem": args.problem,
        "solver": args.solver,
        "tau": args.tau,
        "sigma": args.sigma,
        "R": args.R,
        "max_iters": args.max_iters,
        "seeds": args.seeds,
        "jobs": args.jobs,
        "output_dir": args.output_dir,
        "audit": args.audit,
    }
    hg = {}
    if args.hypergrad is not None:
        hg["method"] = args.hypergrad
    if args.t is not None:
        hg["t"] = args.t
    if args.auto_iters is not None:
        hg["auto_iters"] = args.auto_iters
    if hg:
        over["hypergrad"] = hg
    return over


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fwbilevel",
        description="Projection-free bilevel optimization benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run solver(s) and write artifacts")
    _add_common_flags(p_run)
    p_val = sub.add_parser("validate", help="validate a config and echo it resolved")
    _add_common_flags(p_val)
    args = parser.parse_args(argv)

    overrides = _overrides_from_args(args)
    try:
        base = overrides
        if "hypergrad" in base and args.config is not None:
            # merge the flag-level hypergrad dict over the file's
            with open(args.config) as fh:
                file_cfg = json.load(fh)
            merged_hg = dict(file_cfg.get("hypergrad", {}))
            merged_hg.update(base["hypergrad"])
            base = dict(base)
            base["hypergrad"] = merged_hg
        resolved = load_config(args.config, base)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return 0

    try:
        return run_config(resolved)
    except FWBilevelError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
