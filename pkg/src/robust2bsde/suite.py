"""Bundled verification suites.

``fast`` runs lattice checks only; ``full`` adds the Monte Carlo checks. Every
check returns a :class:`Report`; the suite report is deterministic for a
given seed (no timings, sorted keys) and independent of the thread count.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .bsde_solver import solve_bsde, verify_comparison, verify_stability, verify_tower
from .generators import (
    GeneratorSpec,
    affine_generator,
    butterfly,
    call,
    constant_claim,
    linear_pricing_generator,
    put,
    risk_premium,
    two_rate_generator,
    zero_generator,
)
from .hedging import MarketSpec, super_hedging_price, verify_superhedge, verify_two_rate
from .lattice import Lattice
from .market_paths import (
    ControlPolicy,
    TimeGrid,
    random_feedback_policies,
    simulate,
    uncertain_volatility_family,
)
from .pde_oracle import GOperator, PdeGrid, black_scholes, solve_g_equation
from .reports import REPORT_SCHEMA_VERSION, Report
from .robust_2bsde import (
    discounted_K_identity,
    extract_K,
    robust_value,
    verify_2bsde_comparison,
    verify_apriori_estimates,
    verify_dpp,
    verify_minimality,
    verify_representation,
    verify_sup_consistency,
)

SUITES = ("fast", "full")
UVM_SIGMAS = (0.10, 0.15, 0.20, 0.25, 0.30)
X0 = STRIKE = 100.0


def uvm_family(sigmas=UVM_SIGMAS):
    return uncertain_volatility_family(list(sigmas))


def check_singleton(seed=0, threads=1):
    fam = uvm_family([0.2])
    lat = Lattice(fam, TimeGrid(1.0, 200), X0, nodes=401)
    rs = robust_value(fam, lat.grid, zero_generator(), call(STRIKE), lattice=lat)
    sol = solve_bsde(lat, zero_generator(), call(STRIKE))
    gap = float(np.max(np.abs(rs.V.T - sol.Y)))
    return [Report("singleton_reduction", gap <= 1e-12, gap, 1e-12, {"value": rs.value0})]


def argmax_fraction(rs, gamma_tol=1e-6):
    """Share of nodes with ``|gamma| > gamma_tol`` whose argmax is the largest volatility."""
    x = rs.source.x[:, 0]
    top = rs.n_controls - 1
    hits = total = 0
    for k in range(rs.grid.steps):
        v = rs.V[k + 1]
        hm, hp = x[1:-1] - x[:-2], x[2:] - x[1:-1]
        gamma = 2.0 * ((v[2:] - v[1:-1]) / hp - (v[1:-1] - v[:-2]) / hm) / (hm + hp)
        mask = np.abs(gamma) > gamma_tol
        total += int(mask.sum())
        hits += int(np.sum(rs.ustar[k, 1:-1][mask] == top))
    return hits / max(total, 1), total


def check_uvm_call(seed=0, threads=1):
    fam = uvm_family()
    rs = robust_value(fam, TimeGrid(1.0, 200), zero_generator(), call(STRIKE), x0=X0)
    bs = black_scholes(X0, STRIKE, max(UVM_SIGMAS), 0.0, 1.0)
    rel = abs(rs.value0 / bs - 1.0)
    frac, count = argmax_fraction(rs)
    return [
        Report("uvm_call_vs_black_scholes", rel <= 0.005, rel, 0.005,
               {"value": rs.value0, "black_scholes": bs}),
        Report("uvm_call_argmax_sigma_max", frac >= 0.99, frac, 0.99, {"nodes_counted": count}),
        verify_minimality(rs),
        verify_representation(rs),
        verify_sup_consistency(rs, random_feedback_policies(
            fam.control_set, rs.grid.steps, rs.source.bucket_edges(20), 20, seed)),
    ]


def bsb_butterfly(nodes=1600, steps=1600):
    fam = uvm_family()
    return solve_g_equation(GOperator(fam), butterfly(90.0, 100.0, 110.0),
                            PdeGrid.around(fam, X0, 1.0, nodes, steps), X0)


def check_uvm_butterfly(seed=0, threads=1):
    fam = uvm_family()
    rs = robust_value(fam, TimeGrid(1.0, 200), zero_generator(), butterfly(90.0, 100.0, 110.0),
                      x0=X0)
    pde = bsb_butterfly().value0
    rel = abs(rs.value0 / pde - 1.0)
    rep = verify_representation(rs)
    reports = [
        Report("uvm_butterfly_vs_bsb_pde", rel <= 0.01, rel, 0.01,
               {"value": rs.value0, "pde": pde}),
        Report("uvm_butterfly_margin", rep.value > 0.0 and rep.passed, rep.value, 0.0,
               rep.details),
        verify_minimality(rs),
    ]
    for k_mid in (1, 50, 100, 150, 199):
        dpp = verify_dpp(rs, k_mid).to_report()
        dpp.name = f"dpp_lattice_k{k_mid}"
        reports.append(dpp)
    return reports


def check_K_identity(seed=0, threads=1):
    fam = uvm_family()
    rs = robust_value(fam, TimeGrid(1.0, 200), linear_pricing_generator(0.03), call(STRIKE), x0=X0)
    rep = discounted_K_identity(rs, ControlPolicy.constant(0, "sigma=0.1"))
    dK = extract_K(rs, ControlPolicy.constant(0))
    kt = float(dK.sum(axis=0)[rs.source.center])
    pos = Report("K_positive_at_the_money", kt > 0, kt, 0.0,
                 {"K_T_along_center": kt, "expected_K_T": rep.details["K_T"]})
    return [rep, pos]


def _random_claim(rng):
    kind = rng.integers(0, 3)
    strike = float(rng.uniform(80, 120))
    if kind == 0:
        return call(strike)
    if kind == 1:
        return put(strike)
    lo = float(rng.uniform(80, 95))
    return butterfly(lo, lo + 10.0, lo + 20.0)


def _random_driver(rng):
    if rng.integers(0, 2):
        return ("affine", float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.1, 0.1)))
    r_l = float(rng.uniform(0.0, 0.03))
    return ("two_rate", r_l, r_l + float(rng.uniform(0.0, 0.05)))


def _ordered_drivers(rng):
    """Drivers ``(low, high)`` with ``low <= high`` pointwise."""
    kind, p1, p2 = _random_driver(rng)
    shift = float(rng.uniform(0.0, 0.5))
    if kind == "affine":
        return affine_generator(p1, p2, -shift), affine_generator(p1, p2, 0.0)
    high = two_rate_generator(p1, p2)
    # a wider spread only lowers the two-rate driver
    wider = two_rate_generator(p1, p2 + float(rng.uniform(0.0, 0.03)))
    low = GeneratorSpec(lambda t, x, y, z, a, b: wider(t, x, y, z, a, b) - shift,
                        wider.lipschitz_y, wider.lipschitz_z, "two_rate-shifted")
    return low, high


def _ordered_claims(rng):
    """Claims ``(low, high)`` with ``low <= high`` pointwise."""
    base = _random_claim(rng)
    bump = float(rng.uniform(0.0, 2.0))
    strike = float(rng.uniform(80, 120))
    high = base.shifted(lambda x: bump + np.maximum(x[:, 0] - strike, 0.0))
    return base, high


def _random_family(rng):
    n = int(rng.integers(1, 4))
    sig = np.sort(rng.choice([0.1, 0.15, 0.2, 0.25, 0.3], size=n, replace=False))
    return uvm_family(sig.tolist())


def check_comparisons(seed=0, threads=1, trials=20):
    reports = []
    for i in range(trials):
        rng = np.random.default_rng([seed, 31, i])
        fam = _random_family(rng)
        lat = Lattice(fam, TimeGrid(1.0, 50), X0, nodes=801)
        g_low, g_high = _ordered_drivers(rng)
        c_low, c_high = _ordered_claims(rng)
        pol = ControlPolicy.constant(int(rng.integers(0, len(fam.control_set))))
        # single measure: larger claim and smaller driver give the larger solution
        rep = verify_comparison(g_low, c_high, g_high, c_low, lat, policy=pol)
        rep.name = f"bsde_comparison_{i}"
        reports.append(rep)
        rsA = robust_value(fam, lat.grid, g_high, c_low, lattice=lat)
        rsB = robust_value(fam, lat.grid, g_low, c_high, lattice=lat)
        rep2 = verify_2bsde_comparison(rsA, rsB)
        rep2.name = f"2bsde_comparison_{i}"
        reports.append(rep2)
    return reports


def check_stability(seed=0, threads=1):
    fam = uvm_family([0.2])
    lat = Lattice(fam, TimeGrid(1.0, 100), X0, nodes=1601)
    rep = verify_stability(linear_pricing_generator(0.03), call(STRIKE), lambda x: x[:, 0], lat)
    tower = verify_tower(solve_bsde(lat, linear_pricing_generator(0.03), call(STRIKE)),
                         linear_pricing_generator(0.03), lat, 50)
    tower.name = "tower_lattice"
    return [rep, tower]


def check_apriori(seed=0, threads=1):
    fam = uvm_family()
    rs = robust_value(fam, TimeGrid(1.0, 50), zero_generator(), call(STRIKE), x0=X0, nodes=801)
    return [verify_apriori_estimates(rs)]


def two_rate_market():
    fam = uvm_family([0.2])
    theta = risk_premium(0.02, "state")
    gen = two_rate_generator(0.02, 0.05, theta, 0.1)
    return MarketSpec(fam, gen, call(STRIKE), X0), theta


def check_two_rate(seed=0, threads=1):
    ms, theta = two_rate_market()
    grid = TimeGrid(1.0, 200)
    rep = verify_two_rate(ms, grid, theta, 0.1, borrow_rates=(0.03, 0.04))
    price = super_hedging_price(ms, grid).price
    pde = solve_g_equation(GOperator(ms.family, ms.generator), ms.claim,
                           PdeGrid.around(ms.family, X0, 1.0, 1600, 1600), X0).value0
    rel = abs(price / pde - 1.0)
    lo = black_scholes(X0, STRIKE, 0.2, 0.02, 1.0)
    hi = black_scholes(X0, STRIKE, 0.2, 0.05, 1.0)
    return [
        rep,
        Report("two_rate_vs_semilinear_pde", rel <= 0.005, rel, 0.005,
               {"price": price, "pde": pde}),
        Report("two_rate_bracket", lo <= price <= hi, price, hi,
               {"lower": lo, "upper": hi}),
    ]


def check_pde_oracle(seed=0, threads=1):
    fam = uvm_family([0.3])
    bs = black_scholes(X0, STRIKE, 0.3, 0.0, 1.0)
    sol = solve_g_equation(GOperator(fam), call(STRIKE), PdeGrid.around(fam, X0, 1.0, 800, 800), X0)
    rel = abs(sol.value0 / bs - 1.0)
    return [Report("pde_singleton_call", rel <= 0.002, rel, 0.002, {"pde": sol.value0, "bs": bs})]


def check_linear_closed_form_lattice(seed=0, threads=1, r=0.05):
    fam = uvm_family([0.2])
    errs = []
    for N in (25, 50, 100):
        lat = Lattice(fam, TimeGrid(1.0, N), X0, nodes=201)
        errs.append(abs(solve_bsde(lat, linear_pricing_generator(r), constant_claim(1.0)).y0
                        - np.exp(-r)))
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    ok = all(1.8 <= q <= 2.2 for q in ratios) and errs[0] <= 2e-3
    return [Report("linear_closed_form_lattice", ok, errs[-1], 2e-3,
                   {"steps": [25, 50, 100], "errors": errs, "ratios": ratios})]


FAST_CHECKS: list[Callable] = [
    check_singleton, check_uvm_call, check_uvm_butterfly, check_K_identity, check_comparisons,
    check_stability, check_apriori, check_two_rate, check_pde_oracle,
    check_linear_closed_form_lattice,
]


# -- Monte Carlo checks ---------------------------------------------------------------

def check_dpp_path(seed=0, threads=1, M=100_000):
    fam = uvm_family()
    rs = robust_value(fam, TimeGrid(1.0, 20), zero_generator(), call(STRIKE), "path", X0,
                      M=M, seed=seed, n_jobs=threads)
    dpp = verify_dpp(rs, 10).to_report()
    dpp.name = "dpp_path"
    return [dpp]


def check_linear_closed_form_path(seed=0, threads=1, r=0.05, M=100_000):
    fam = uvm_family([0.2])
    ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 50), M, X0, seed, threads)
    out = []
    for sign in (1.0, -1.0):
        sol = solve_bsde(ens, linear_pricing_generator(sign * r), constant_claim(1.0))
        target = np.exp(-sign * r)
        err = abs(sol.y0 - target)
        out.append(Report(f"linear_closed_form_path_{'disc' if sign > 0 else 'growth'}",
                          err <= 2e-3, err, 2e-3, {"value": sol.y0, "target": target}))
    return out


def check_bsde_call_path(seed=0, threads=1, M=200_000):
    fam = uvm_family([0.2])
    ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 50), M, X0, seed + 1, threads)
    sol = solve_bsde(ens, zero_generator(), call(STRIKE))
    bs = black_scholes(X0, STRIKE, 0.2, 0.0, 1.0)
    gap = abs(sol.y0 - bs)
    tower = verify_tower(sol, zero_generator(), ens, 25, fresh_seed=seed + 2)
    tower.name = "tower_path"
    return [Report("bsde_call_path_vs_black_scholes", gap <= 3 * sol.stderr0, gap,
                   3 * sol.stderr0, {"value": sol.y0, "black_scholes": bs}), tower]


def check_comparison_path(seed=0, threads=1, trials=5, M=20_000):
    out = []
    for i in range(trials):
        rng = np.random.default_rng([seed, 77, i])
        fam = uvm_family([float(rng.choice([0.1, 0.2, 0.3]))])
        ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 20), M, X0,
                       seed + 100 + i, threads)
        g_low, g_high = _ordered_drivers(rng)
        c_low, c_high = _ordered_claims(rng)
        rep = verify_comparison(g_low, c_high, g_high, c_low, ens)
        rep.name = f"bsde_comparison_path_{i}"
        out.append(rep)
    return out


def check_superhedge(seed=0, threads=1, M=20_000):
    fam = uvm_family()
    ms = MarketSpec(fam, zero_generator(), call(STRIKE), X0)
    out = []
    q99 = {}
    gauss = {}
    for N in (200, 400):
        hr = super_hedging_price(ms, TimeGrid(1.0, N))
        if N == 200:
            direct = robust_value(fam, TimeGrid(1.0, N), ms.generator, ms.claim, x0=X0).value0
            gap = abs(hr.price - direct)
            out.append(Report("price_equals_robust_value", gap <= 1e-12, gap, 1e-12,
                              {"price": hr.price, "robust_value": direct}))
        rep = verify_superhedge(hr, M=M, seed=seed, n_jobs=threads)
        rep.name = f"superhedge_N{N}"
        out.append(rep)
        q99[N] = rep.value
        g = verify_superhedge(hr, M=M, seed=seed, n_jobs=threads, increments="gaussian",
                              policies=[hr.solution.argmax_policy()], eps_hedge=np.inf)
        gauss[N] = g.value
    dec = q99[400] <= q99[200] and gauss[400] < gauss[200]
    out.append(Report("superhedge_decrease", dec, q99[400], q99[200],
                      {"q99_lattice_increments": q99, "q99_gaussian_increments": gauss}))
    return out


FULL_CHECKS: list[Callable] = FAST_CHECKS + [
    check_dpp_path, check_linear_closed_form_path, check_bsde_call_path, check_comparison_path,
    check_superhedge,
]


def run_suite(name: str, seed: int = 0, threads: int = 1, log=None) -> dict:
    """Run a named suite; returns the machine-readable summary."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; valid suites: {', '.join(SUITES)}")
    checks = FAST_CHECKS if name == "fast" else FULL_CHECKS
    reports = []
    for check in checks:
        for rep in check(seed=seed, threads=threads):
            reports.append(rep.to_dict())
            if log is not None:
                log(rep)
    failures = [r["name"] for r in reports if r["applicable"] and not r["passed"]]
    return {"schema_version": REPORT_SCHEMA_VERSION, "suite": name, "seed": seed,
            "checks": reports, "failures": failures, "passed": not failures}
