"""Robust super-hedging: price by the robust value, strategy by its ``Z`` surface.

Wealth follows ``dY = f(t, X, Y, sigma^T Z, a, b) dt + Z dX^c`` where ``Z`` counts
units of the risky asset. The super-replication price over the measure family
is the robust value at time 0, and the ``Z`` of the decomposition is a
super-hedging strategy. :func:`verify_superhedge` checks the latter ex post by
rolling the wealth forward on fresh paths under many measures of the family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde_solver import half_and_pinv
from .errors import InvalidParametersError
from .generators import GeneratorSpec, TerminalClaim, linear_pricing_generator, two_rate_generator
from .market_paths import (
    ControlPolicy,
    DiffusionFamily,
    TimeGrid,
    random_feedback_policies,
    simulate,
)
from .reports import Report, jsonable
from .robust_2bsde import RobustSolution, robust_value

BLOWUP_FACTOR = 1e6


@dataclass(frozen=True)
class MarketSpec:
    """Uncertain asset dynamics, wealth driver, claim and initial asset price.

    ``saturated`` is documentation only: the implemented measures carry no
    orthogonal martingale part, which is what saturation buys.
    """

    family: DiffusionFamily
    generator: GeneratorSpec
    claim: TerminalClaim
    x0: float
    notional: Optional[float] = None
    saturated: bool = True

    @property
    def scale(self) -> float:
        """Notional used for relative tolerances (defaults to ``x0``)."""
        return float(self.notional if self.notional is not None else abs(self.x0))


@dataclass
class HedgeResult:
    price: float
    solution: RobustSolution = field(repr=False)
    market: MarketSpec = field(repr=False)
    reports: dict = field(default_factory=dict)

    @property
    def strategy(self) -> np.ndarray:
        """``Z`` surface ``(N, n, d)`` in units of the asset."""
        return self.solution.Z

    def strategy_at(self, k: int, x) -> np.ndarray:
        """Linear interpolation in the state, held constant past the grid ends."""
        return self.solution.z_at(k, x)

    def to_dict(self) -> dict:
        return jsonable({
            "price": self.price,
            "stderr": self.solution.stderr0,
            "mode": self.solution.mode,
            "claim": self.market.claim.name,
            "generator": self.market.generator.name,
            "reports": {k: v.to_dict() if hasattr(v, "to_dict") else v
                        for k, v in self.reports.items()},
        })


def super_hedging_price(ms: MarketSpec, grid: TimeGrid, mode: str = "lattice",
                        **kwargs) -> HedgeResult:
    """``P_sup = sup_P E^P[Y_0]``, the robust value at time 0."""
    rs = robust_value(ms.family, grid, ms.generator, ms.claim, mode, ms.x0, **kwargs)
    return HedgeResult(rs.value0, rs, ms)


def roll_wealth(hr: HedgeResult, ens, y0: float):
    """Forward wealth along ``ens`` from ``y0`` with the stored strategy.

    Returns ``(Y_T, blown)`` where ``blown`` lists offending path indices.
    """
    gen = hr.market.generator
    N, dt = ens.grid.steps, ens.grid.dt
    Y = np.full(ens.M, float(y0))
    blown = np.zeros(ens.M, dtype=bool)
    limit = BLOWUP_FACTOR * max(hr.market.scale, 1.0)
    for k in range(N):
        Xk = ens.X[:, k]
        Zk = hr.strategy_at(k, Xk)
        a, b = ens.a_hat[:, k], ens.drift_b[:, k]
        half, _ = half_and_pinv(a)
        z = np.einsum("nji,nj->ni", half, Zk)
        f = gen(ens.grid.time(k), Xk, Y, z, a, b)
        Y = Y + f * dt + np.einsum("ni,ni->n", Zk, ens.dX_c(k))
        bad = ~np.isfinite(Y) | (np.abs(Y) > limit)
        blown |= bad
        Y = np.where(bad, np.nan, Y)
    return Y, np.flatnonzero(blown)


def _shortfall_stats(Y_T, xi):
    ok = np.isfinite(Y_T)
    short = np.maximum(xi[ok] - Y_T[ok], 0.0)
    surplus = Y_T[ok] - xi[ok]
    n = max(int(ok.sum()), 1)
    return {
        "q99": float(np.quantile(short, 0.99)) if ok.any() else float("nan"),
        "q95": float(np.quantile(short, 0.95)) if ok.any() else float("nan"),
        "mean": float(short.mean()) if ok.any() else float("nan"),
        "max": float(short.max()) if ok.any() else float("nan"),
        "prob_positive": float(np.mean(short > 1e-12)) if ok.any() else float("nan"),
        "surplus_mean": float(surplus.mean()) if ok.any() else float("nan"),
        "surplus_stderr": float(surplus.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
    }


def family_policies(hr: HedgeResult, random_count: int = 20, buckets: int = 20,
                    seed: int = 0) -> list:
    """Constant policies, the argmax policy and ``random_count`` random feedback tables."""
    rs = hr.solution
    pols = rs.constant_policies() + [rs.argmax_policy()]
    if random_count:
        if rs.mode == "lattice":
            edges = rs.source.bucket_edges(buckets)
        else:
            edges = np.quantile(rs.source.X[:, -1, 0], np.linspace(0, 1, buckets + 1)[1:-1])
        pols += random_feedback_policies(rs.family.control_set, rs.grid.steps, edges,
                                         random_count, seed)
    return pols


def verify_superhedge(hr: HedgeResult, ms: Optional[MarketSpec] = None, M: int = 20_000,
                      seed: int = 0, policies: Optional[Sequence[ControlPolicy]] = None,
                      random_count: int = 20, eps_hedge: Optional[float] = None,
                      increments: str = "rademacher", y0_offset: float = 0.0,
                      n_jobs: int = 1) -> Report:
    """Forward super-replication check under every policy of the stress set.

    For each policy, ``M`` fresh paths are drawn, wealth is rolled from
    ``price + y0_offset`` and the shortfall ``(xi - Y_T)^+`` is summarized.
    Passes when every 99th percentile is at most ``eps_hedge`` (default
    ``0.5%`` of the notional) and no wealth path blows up.
    """
    ms = ms or hr.market
    pols = list(policies) if policies is not None else family_policies(hr, random_count, seed=seed)
    eps = 0.005 * ms.scale if eps_hedge is None else eps_hedge
    grid = hr.solution.grid
    per_policy, blowups = {}, {}
    worst = 0.0
    for i, pol in enumerate(pols):
        ens = simulate(ms.family, pol, grid, M, ms.x0, seed + 1000 + i, n_jobs, increments)
        Y_T, blown = roll_wealth(hr, ens, hr.price + y0_offset)
        xi = ms.claim(ens.X[:, -1])
        stats = _shortfall_stats(Y_T, xi)
        per_policy[pol.name] = stats
        if blown.size:
            blowups[pol.name] = {"count": int(blown.size), "first_path": int(blown[0])}
        worst = max(worst, stats["q99"])
    passed = worst <= eps and not blowups
    return Report("superhedge", passed, worst, eps,
                  {"increments": increments, "paths": M, "steps": grid.steps,
                   "policies": per_policy, "blowups": blowups, "y0": hr.price + y0_offset})


def verify_duality_lower_bound(hr: HedgeResult, tolerance: float, M: int = 20_000,
                               seed: int = 0, increments: str = "rademacher") -> Report:
    """Starting ``5 * tolerance`` below the price must leave a shortfall under the argmax policy."""
    pol = hr.solution.argmax_policy()
    rep = verify_superhedge(hr, M=M, seed=seed, policies=[pol], increments=increments,
                            y0_offset=-5.0 * tolerance, eps_hedge=np.inf)
    prob = rep.details["policies"][pol.name]["prob_positive"]
    return Report("duality_lower_bound", prob > 0.0, prob, 0.0,
                  {"offset": -5.0 * tolerance, "shortfall": rep.details["policies"][pol.name]})


def two_rate_price(ms: MarketSpec, grid: TimeGrid, mode: str = "lattice", **kwargs) -> HedgeResult:
    """Super-hedging price under different lending and borrowing rates.

    ``ms.generator`` must come from :func:`two_rate_generator`.
    """
    params = ms.generator.params
    if "r_lend" not in params or "r_borrow" not in params:
        raise InvalidParametersError("two_rate_price needs a two-rate generator")
    if params["r_borrow"] < params["r_lend"]:
        raise InvalidParametersError("borrowing rate is below the lending rate")
    return super_hedging_price(ms, grid, mode, **kwargs)


def verify_two_rate(ms: MarketSpec, grid: TimeGrid, theta=None, theta_bound=None,
                    borrow_rates: Sequence[float] = (), **kwargs) -> Report:
    """Collapse to the linear price when rates coincide, and monotonicity in ``r_borrow``."""
    r_l = ms.generator.params["r_lend"]
    r_b = ms.generator.params["r_borrow"]
    lin = MarketSpec(ms.family, linear_pricing_generator(r_l, theta, theta_bound), ms.claim, ms.x0)
    flat = MarketSpec(ms.family, two_rate_generator(r_l, r_l, theta, theta_bound), ms.claim, ms.x0)
    lattice = kwargs.pop("lattice", None)
    p_lin = super_hedging_price(lin, grid, lattice=lattice, **kwargs)
    lattice = p_lin.solution.source
    p_flat = super_hedging_price(flat, grid, lattice=lattice, **kwargs)
    collapse = abs(p_flat.price - p_lin.price)
    rates = sorted(set([r_l, *borrow_rates, r_b]))
    prices = [
        super_hedging_price(MarketSpec(ms.family, two_rate_generator(r_l, rb, theta, theta_bound),
                                       ms.claim, ms.x0), grid, lattice=lattice, **kwargs).price
        for rb in rates
    ]
    steps = np.diff(prices)
    monotone = bool(np.all(steps >= -1e-10))
    passed = collapse <= 1e-12 and monotone
    return Report("two_rate", passed, collapse, 1e-12,
                  {"linear_price": p_lin.price, "collapsed_price": p_flat.price,
                   "borrow_rates": rates, "prices": prices, "monotone": monotone})
