"""Command line entry point: ``robust2bsde run`` and ``robust2bsde verify``.

Exit codes: 0 when every enabled verifier passes, 1 on a verifier failure,
2 on a configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bsde_solver import solve_bsde, verify_tower
from .config import build, load_config
from .errors import ConfigurationError, InvalidParametersError, PreconditionError
from .generators import risk_premium
from .hedging import HedgeResult, MarketSpec, verify_superhedge, verify_two_rate
from .lattice import Lattice
from .market_paths import ControlPolicy, random_feedback_policies, simulate
from .pde_oracle import GOperator, PdeGrid, black_scholes, solve_g_equation
from .reports import REPORT_SCHEMA_VERSION, Report, dumps
from .robust_2bsde import (
    discounted_K_identity,
    robust_value,
    verify_apriori_estimates,
    verify_dpp,
    verify_minimality,
    verify_representation,
    verify_sup_consistency,
)
from .suite import SUITES, run_suite

log = logging.getLogger("robust2bsde")

DEFAULT_VERIFIERS = {
    "solve-bsde": ["tower"],
    "robust-value": ["dpp", "minimality", "representation", "oracle"],
    "price": ["oracle", "superhedge"],
    "verify": ["tower", "dpp", "minimality", "representation", "sup_consistency",
               "discounted_K", "apriori", "oracle"],
}


def _write(out: Path, name: str, payload) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(dumps(payload))


def _source(exp, policy):
    n = exp.config["numerics"]
    if n["mode"] == "lattice":
        return Lattice(exp.family, exp.grid, exp.x0, nodes=n["nodes"], n_std=n["n_std"])
    return simulate(exp.family, policy, exp.grid, n["paths"], exp.x0, n["seed"], n["threads"],
                    n["increments"])


def _black_scholes_reference(exp):
    """Black-Scholes value at the largest volatility for calls and puts without risk premium."""
    cfg = exp.config
    m = cfg["market"]
    if exp.claim.name not in ("call", "put") or exp.family.dim != 1 or not m["geometric"]:
        return None
    if exp.generator.name not in ("zero", "linear") or "risk_premium" in cfg["generator"]:
        return None
    r = exp.generator.params.get("r", 0.0)
    if r != m["rate"]:
        return None
    return black_scholes(exp.x0, exp.claim.params["strike"], max(m["sigmas"]), r,
                         exp.grid.horizon, exp.claim.name)


def _pde_value(exp):
    out = exp.config["output"]
    grid = PdeGrid.around(exp.family, exp.x0, exp.grid.horizon, out["pde_nodes"], out["pde_steps"])
    return solve_g_equation(GOperator(exp.family, exp.generator), exp.claim, grid, exp.x0).value0


def _oracle_report(exp, value, stderr):
    cfg = exp.config
    if exp.family.dim != 1:
        return Report("oracle", True, 0.0, 0.0, {"reason": "no PDE oracle in d > 1"},
                      applicable=False)
    pde = _pde_value(exp)
    rel_tol = cfg["tolerances"]["oracle_relative"]
    tol = rel_tol * abs(pde) + 3.0 * stderr
    gap = abs(value - pde)
    details = {"pde": pde, "value": value, "black_scholes_sigma_max": _black_scholes_reference(exp)}
    return Report("oracle", gap <= tol, gap, tol, details)


def _robust_checks(exp, rs, names):
    cfg = exp.config
    n = cfg["numerics"]
    N = exp.grid.steps
    reports = []
    lattice = rs.mode == "lattice"
    for name in names:
        if name == "dpp":
            if N < 2:
                continue
            if lattice:
                for k_mid in sorted({1, N // 4 or 1, N // 2, (3 * N) // 4 or 1, N - 1}):
                    rep = verify_dpp(rs, k_mid).to_report()
                    rep.name = f"dpp_k{k_mid}"
                    reports.append(rep)
            else:
                reports.append(verify_dpp(rs, N // 2, fresh_seed=n["seed"] + 1).to_report())
        elif name == "minimality":
            reports.append(verify_minimality(rs, eps_min=cfg["tolerances"]["minimality"],
                                             M=n["paths"], seed=n["seed"] + 2))
        elif name == "representation":
            reports.append(verify_representation(rs, M=n["paths"], seed=n["seed"] + 3))
        elif name == "sup_consistency":
            if lattice:
                pols = rs.constant_policies() + random_feedback_policies(
                    rs.family.control_set, N, rs.source.bucket_edges(20), 20, n["seed"])
                reports.append(verify_sup_consistency(rs, pols))
        elif name == "discounted_K":
            if lattice and exp.generator.name in ("zero", "constant", "affine", "linear"):
                reports.append(discounted_K_identity(rs, ControlPolicy.constant(n["policy"])))
        elif name == "apriori":
            if lattice:
                reports.append(verify_apriori_estimates(rs, n["p"], n["kappa"]))
        elif name == "oracle":
            reports.append(_oracle_report(exp, rs.value0, rs.stderr0))
        elif name == "tower" and N >= 2:
            policy = ControlPolicy.constant(n["policy"])
            source = rs.source if lattice else _source(exp, policy)
            sol = solve_bsde(source, exp.generator, exp.claim, exp.basis, n["picard_tol"],
                             n.get("clip_m"), policy=policy if lattice else None)
            reports.append(verify_tower(sol, exp.generator, source, N // 2,
                                        fresh_seed=n["seed"] + 4))
        elif name == "superhedge":
            # the price is the robust value by construction
            ms = _market(exp)
            h = cfg["hedge"]
            reports.append(verify_superhedge(
                HedgeResult(rs.value0, rs, ms), ms, M=h["paths"], seed=n["seed"],
                random_count=h["random_policies"],
                eps_hedge=cfg["tolerances"]["hedge_fraction"] * ms.scale,
                increments=h["increments"], n_jobs=n["threads"]))
        elif name == "two_rate":
            if lattice and exp.generator.name == "two_rate":
                theta = bound = None
                rp = cfg["generator"].get("risk_premium")
                if rp is not None:
                    theta, bound = risk_premium(rp["rate"], rp.get("reference", "unit")), rp["bound"]
                reports.append(verify_two_rate(_market(exp), exp.grid, theta, bound,
                                               lattice=rs.source))
    return reports


def _market(exp):
    m = exp.config["market"]
    return MarketSpec(exp.family, exp.generator, exp.claim, exp.x0, m.get("notional"))


def _robust_solution(exp):
    n = exp.config["numerics"]
    return robust_value(exp.family, exp.grid, exp.generator, exp.claim, n["mode"], exp.x0,
                        nodes=n["nodes"], n_std=n["n_std"], M=n["paths"], seed=n["seed"],
                        basis=exp.basis, picard_tol=n["picard_tol"], clip_m=n.get("clip_m"),
                        n_jobs=n["threads"], increments=n["increments"])


def run_experiment(cfg: dict, out: Path) -> int:
    exp = build(cfg)
    task = cfg["task"]
    n = cfg["numerics"]
    names = cfg.get("verifiers", DEFAULT_VERIFIERS[task])
    stride = cfg["output"]["surface_stride"]
    result = {"schema_version": REPORT_SCHEMA_VERSION, "task": task, "name": cfg.get("name", ""),
              "config": cfg}

    if task == "verify" and "suite" in cfg:
        summary = run_suite(cfg["suite"], n["seed"], n["threads"], _log_report)
        _write(out, "report.json", summary)
        result["suite"] = summary["suite"]
        result["passed"] = summary["passed"]
        result["failures"] = summary["failures"]
        _write(out, "result.json", result)
        return 0 if summary["passed"] else 1

    if task == "solve-bsde":
        policy = ControlPolicy.constant(n["policy"], exp.family.control_set.labels[n["policy"]])
        source = _source(exp, policy)
        sol = solve_bsde(source, exp.generator, exp.claim, exp.basis, n["picard_tol"],
                         n.get("clip_m"), policy=policy if n["mode"] == "lattice" else None)
        out.mkdir(parents=True, exist_ok=True)
        sol.to_csv(out / "surface.csv", stride)
        sol.write_diagnostics(out / "diagnostics.csv")
        result["result"] = {"value": sol.y0, "stderr": sol.stderr0, "mode": sol.mode,
                            "policy": policy.name, "steps": exp.grid.steps,
                            "picard_iters_max": int(sol.picard_iters.max(initial=0))}
        reports = []
        for name in names:
            if name == "tower" and exp.grid.steps >= 2:
                reports.append(verify_tower(sol, exp.generator, source, exp.grid.steps // 2,
                                            fresh_seed=n["seed"] + 4))
            elif name == "oracle":
                reports.append(_oracle_report_single(exp, sol))
    else:
        rs = _robust_solution(exp)
        out.mkdir(parents=True, exist_ok=True)
        rs.to_csv(out / "surface.csv", stride)
        result["result"] = rs.summary()
        if task == "price":
            result["result"]["price"] = rs.value0
        else:
            result["result"]["value"] = rs.value0
        reports = _robust_checks(exp, rs, names)

    for rep in reports:
        _log_report(rep)
    failures = [r.name for r in reports if r.applicable and not r.passed]
    result["verifiers"] = {r.name: {"passed": r.passed, "value": r.value,
                                    "tolerance": r.tolerance, "applicable": r.applicable}
                           for r in reports}
    result["passed"] = not failures
    oracle = [r for r in reports if r.name == "oracle"]
    if oracle and oracle[0].applicable:
        result["oracle"] = oracle[0].details
    _write(out, "result.json", result)
    _write(out, "report.json", {"schema_version": REPORT_SCHEMA_VERSION, "task": task,
                                "checks": [r.to_dict() for r in reports],
                                "failures": failures, "passed": not failures})
    return 0 if not failures else 1


def _oracle_report_single(exp, sol):
    """Single-measure oracle: the PDE of the chosen constant control."""
    m = exp.config["market"]
    sigma = m["sigmas"][exp.config["numerics"]["policy"]]
    single = build(dict(exp.config, market=dict(m, sigmas=[sigma])))
    return _oracle_report(single, sol.y0, sol.stderr0)


def _log_report(rep) -> None:
    status = "n/a " if not rep.applicable else ("PASS" if rep.passed else "FAIL")
    log.info("%s %-32s value=%.6g tol=%.3g", status, rep.name, rep.value, rep.tolerance)


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["numerics"]["seed"] = args.seed
    if getattr(args, "mode", None):
        cfg["numerics"]["mode"] = args.mode
    if args.threads is not None:
        cfg["numerics"]["threads"] = args.threads
    if getattr(args, "suite", None):
        cfg["suite"] = args.suite
    return cfg


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust2bsde",
                                description="Robust BSDE and second-order BSDE experiments.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a YAML config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--mode", choices=["lattice", "path"])
    run.add_argument("--suite", help="run a verification suite (with task: verify)")
    run.add_argument("--threads", type=int)

    ver = sub.add_parser("verify", help="run a bundled verification suite")
    ver.add_argument("--suite", default="fast")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--out", type=Path, default=Path("out"))
    ver.add_argument("--threads", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "verify":
            if args.suite not in SUITES:
                raise ConfigurationError(
                    f"unknown suite {args.suite!r}; valid suites: {', '.join(SUITES)}")
            if args.threads < 1:
                raise ConfigurationError("--threads must be at least 1")
            summary = run_suite(args.suite, args.seed, args.threads, _log_report)
            _write(args.out, "report.json", summary)
            _write(args.out, "result.json", {
                "schema_version": REPORT_SCHEMA_VERSION, "task": "verify", "suite": args.suite,
                "seed": args.seed, "passed": summary["passed"], "failures": summary["failures"]})
            log.info("%d checks, %d failures", len(summary["checks"]), len(summary["failures"]))
            return 0 if summary["passed"] else 1

        cfg = load_config(args.config)
        if args.suite is not None and args.suite not in SUITES:
            raise ConfigurationError(
                f"unknown suite {args.suite!r}; valid suites: {', '.join(SUITES)}")
        if args.threads is not None and args.threads < 1:
            raise ConfigurationError("--threads must be at least 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("--seed must be non-negative")
        cfg = _apply_overrides(cfg, args)
        if args.suite is not None and cfg["task"] != "verify":
            raise ConfigurationError("--suite needs a config with task: verify")
        out = args.out if args.out is not None else Path(cfg["output"]["dir"])
        try:
            return run_experiment(cfg, out)
        except (InvalidParametersError, PreconditionError) as exc:
            raise ConfigurationError(str(exc)) from exc
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
